"""Per-mode model assembly over one :class:`~lingrid.diffcore.ParamStore`.

Only the components a mode's losses touch get parameters, so a checkpoint
records which heads exist.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np
from omegaconf import DictConfig

from lingrid import diffcore as dc
from lingrid.association import (
    AttentionHead,
    ClassifierHead,
    PhraseDecoder,
    ScoreHead,
    check_mode,
    joint_rep,
    relevance_score,
)
from lingrid.diffcore import ParamStore, Tensor
from lingrid.encoders import FeatureMap, TextEncoder, VisualEncoder
from lingrid.errors import ConfigError
from lingrid.textpipe import Vocab

logger = logging.getLogger(__name__)


@dataclass
class ModelDims:
    vocab_size: int
    num_classes: int
    input_size: Tuple[int, int] = (64, 32)
    conv_widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    embed_dim: int = 64
    out_dim: int = 64
    word_dim: int = 32
    hidden_dim: int = 64
    pool_window: Tuple[int, int] = (2, 2)

    @classmethod
    def from_config(cls, cfg: DictConfig, vocab_size: int, num_classes: int) -> "ModelDims":
        return cls(
            vocab_size=vocab_size,
            num_classes=num_classes,
            input_size=(cfg.image_height, cfg.image_width),
            conv_widths=list(cfg.conv_widths),
            embed_dim=cfg.embed_dim,
            out_dim=cfg.out_dim,
            word_dim=cfg.word_dim,
            hidden_dim=cfg.hidden_dim,
            pool_window=tuple(cfg.pool_window),
        )


class LinGridModel:
    def __init__(self, dims: ModelDims, mode: str, vocab: Vocab, seed: int = 0):
        terms = check_mode(mode)
        if len(vocab) != dims.vocab_size:
            raise ConfigError(f"vocabulary has {len(vocab)} words, dims say {dims.vocab_size}")
        self.dims = dims
        self.mode = mode
        self.boundary_tokens = (vocab.start, vocab.end)
        self.pool_window = tuple(dims.pool_window)
        self.store = ParamStore(seed)

        self.visual = VisualEncoder(
            self.store, dims.conv_widths, dims.embed_dim, dims.out_dim, dims.input_size
        )
        grid = self.visual.grid
        if self.pool_window[0] > grid[0] or self.pool_window[1] > grid[1]:
            raise ConfigError(f"pooling window {self.pool_window} larger than grid {grid}")
        self.image_head = ClassifierHead(
            self.store, "head.image.W", dims.num_classes, dims.out_dim
        )

        use_global = any(t in terms for t in ("L_T", "L_dis", "L_rank"))
        use_local = "L_rec" in terms
        self.text: Optional[TextEncoder] = None
        if use_global or use_local:
            self.text = TextEncoder(
                self.store,
                dims.vocab_size,
                dims.word_dim,
                dims.hidden_dim,
                dims.embed_dim,
                use_global=use_global,
                use_local=use_local,
            )
        self.text_head = None
        if "L_T" in terms:
            self.text_head = ClassifierHead(
                self.store, "head.text.W", dims.num_classes, dims.embed_dim
            )
        self.score_head = ScoreHead(self.store, dims.embed_dim) if "L_dis" in terms else None
        self.attention = self.decoder = None
        if use_local:
            self.attention = AttentionHead(self.store, dims.embed_dim)
            self.decoder = PhraseDecoder(
                self.store, self.text.embedding, dims.embed_dim, dims.hidden_dim
            )
        logger.info(
            f"built {mode} model with {len(self.store)} parameter tensors "
            f"({sum(p.size for p in self.store)} values)"
        )

    @classmethod
    def from_config(
        cls,
        cfg: DictConfig,
        vocab: Vocab,
        num_classes: int,
        mode: Optional[str] = None,
        seed: Optional[int] = None,
    ) -> "LinGridModel":
        dims = ModelDims.from_config(cfg, len(vocab), num_classes)
        return cls(dims, mode or cfg.mode, vocab, seed=cfg.seed if seed is None else seed)

    @property
    def parameters(self) -> List[dc.Parameter]:
        return list(self.store)

    @property
    def has_score_head(self) -> bool:
        return self.score_head is not None

    def image_features(self, images: np.ndarray) -> Tuple[FeatureMap, Tensor, Tensor]:
        return self.visual.encode(Tensor(np.asarray(images)))

    def embed_images(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Identity features phi for evaluation, in chunks."""
        chunks = [
            self.image_features(images[i : i + batch_size])[2].numpy()
            for i in range(0, len(images), batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def score(self, images: np.ndarray, sequence: List[int], batch_size: int = 32) -> np.ndarray:
        """Relevance s(I, T) of one description against every image."""
        if not self.has_score_head:
            raise ConfigError(f"a {self.mode} checkpoint has no relevance score head")
        theta = self.text.encode_texts([sequence])
        scores = []
        for i in range(0, len(images), batch_size):
            _, psi_bar, _ = self.image_features(images[i : i + batch_size])
            scores.append(relevance_score(joint_rep(psi_bar, theta), self.score_head).numpy())
        return np.concatenate(scores)

    @contextmanager
    def image_only(self) -> Iterator["LinGridModel"]:
        """Any text encoder call inside this block is a verification failure."""
        if self.text is None:
            yield self
            return
        self.text.locked = True
        try:
            yield self
        finally:
            self.text.locked = False
