import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from lingrid import diffcore as dc
from lingrid.diffcore import ParamStore, Tensor
from lingrid.errors import ConfigError, VerificationError
from lingrid.textpipe import TokenT, Vocab, encode

logger = logging.getLogger(__name__)

NUM_CONV_BLOCKS = 3
CONV_STRIDE = 2
TOTAL_STRIDE = CONV_STRIDE**NUM_CONV_BLOCKS


@dataclass
class FeatureMap:
    """K = height * width bins of dimension d, row-major over the grid."""

    bins: Tensor  # (B, K, d)
    height: int
    width: int

    def __post_init__(self):
        if self.bins.ndim != 3 or self.bins.shape[1] != self.height * self.width:
            raise ConfigError(
                f"feature map bins {self.bins.shape} do not fit a "
                f"{self.height}x{self.width} grid"
            )

    @property
    def num_bins(self) -> int:
        return self.height * self.width


def pooling_matrix(
    height: int, width: int, window: Tuple[int, int]
) -> Tuple[np.ndarray, int, int]:
    """(K', K) averaging matrix; trailing rows/cols fold into the last cell."""
    wh, ww = window
    if wh < 1 or ww < 1 or wh > height or ww > width:
        raise ConfigError(f"pooling window {window} larger than grid {height}x{width}")
    out_h, out_w = height // wh, width // ww

    def cell_of(i, step, cells):
        return min(i // step, cells - 1)

    mixing = np.zeros((out_h * out_w, height * width))
    for r in range(height):
        for c in range(width):
            cell = cell_of(r, wh, out_h) * out_w + cell_of(c, ww, out_w)
            mixing[cell, r * width + c] = 1.0
    mixing /= mixing.sum(axis=1, keepdims=True)
    return mixing, out_h, out_w


def pool_neighbors(fmap: FeatureMap, window: Tuple[int, int] = (2, 2)) -> FeatureMap:
    mixing, out_h, out_w = pooling_matrix(fmap.height, fmap.width, tuple(window))
    return FeatureMap(dc.bin_project(mixing, fmap.bins), out_h, out_w)


class VisualEncoder:
    def __init__(
        self,
        store: ParamStore,
        widths: Sequence[int] = (16, 32, 64),
        dim: int = 64,
        out_dim: int = 64,
        input_size: Tuple[int, int] = (64, 32),
        prefix: str = "visual",
    ):
        if len(widths) != NUM_CONV_BLOCKS:
            raise ConfigError(f"expected {NUM_CONV_BLOCKS} conv widths, got {list(widths)}")
        height, width = input_size
        if height % TOTAL_STRIDE or width % TOTAL_STRIDE:
            raise ConfigError(f"input size {input_size} must be divisible by {TOTAL_STRIDE}")
        self.input_size = (height, width)
        self.grid = (height // TOTAL_STRIDE, width // TOTAL_STRIDE)
        if self.grid[0] * self.grid[1] < 4:
            raise ConfigError(f"input size {input_size} gives fewer than 4 bins")
        self.dim = dim
        self.out_dim = out_dim

        self.convs = []
        c_in = 3
        for i, c_out in enumerate(widths, start=1):
            w = store.glorot(f"{prefix}.conv{i}.W", (3, 3, c_in, c_out))
            b = store.zeros(f"{prefix}.conv{i}.b", (c_out,))
            self.convs.append((w, b))
            c_in = c_out
        self.psi_w = store.glorot(f"{prefix}.psi.W", (dim, c_in))
        self.psi_b = store.zeros(f"{prefix}.psi.b", (dim,))
        self.phi_w = store.glorot(f"{prefix}.phi.W", (out_dim, dim))
        self.phi_b = store.zeros(f"{prefix}.phi.b", (out_dim,))

    def conv_stack(self, images: Tensor) -> Tensor:
        """Three 3x3 stride-2 tanh blocks, then the 1x1 projection to ``dim``."""
        x = images
        for w, b in self.convs:
            x = dc.tanh(dc.conv2d(x, w, b, stride=CONV_STRIDE, padding=1))
        return dc.linear(x, self.psi_w, self.psi_b)

    def feature_map(self, images: Tensor) -> FeatureMap:
        if images.ndim != 4 or images.shape[1:] != (*self.input_size, 3):
            raise ConfigError(
                f"image batch shape {images.shape} does not match input size "
                f"{self.input_size}x3"
            )
        grid = self.conv_stack(images)
        batch, height, width, dim = grid.shape
        return FeatureMap(dc.reshape(grid, (batch, height * width, dim)), height, width)

    def encode(self, images: Tensor) -> Tuple[FeatureMap, Tensor, Tensor]:
        fmap = self.feature_map(images)
        psi_bar = dc.mean(fmap.bins, axis=1)
        phi = dc.linear(psi_bar, self.phi_w, self.phi_b)
        return fmap, psi_bar, phi


def encode_image(encoder: VisualEncoder, image: np.ndarray) -> Tuple[FeatureMap, Tensor, Tensor]:
    return encoder.encode(Tensor(np.asarray(image)[None]))


class LSTMCell:
    def __init__(self, store: ParamStore, input_dim: int, hidden_dim: int, prefix: str):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_x = store.glorot(f"{prefix}.W_x", (4 * hidden_dim, input_dim))
        self.w_h = store.glorot(f"{prefix}.W_h", (4 * hidden_dim, hidden_dim))
        self.b = store.zeros(f"{prefix}.b", (4 * hidden_dim,))

    def zero_state(self, batch: int) -> Tuple[Tensor, Tensor]:
        zeros = np.zeros((batch, self.hidden_dim))
        return Tensor(zeros), Tensor(zeros)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        return lstm_step(x, h, c, self)


def lstm_step(x: Tensor, h: Tensor, c: Tensor, cell: LSTMCell) -> Tuple[Tensor, Tensor]:
    """Gate order in the stacked weights: input, forget, candidate, output."""
    n = cell.hidden_dim
    z = dc.linear(x, cell.w_x) + dc.linear(h, cell.w_h, cell.b)
    i = dc.sigmoid(z[..., 0:n])
    f = dc.sigmoid(z[..., n : 2 * n])
    g = dc.tanh(z[..., 2 * n : 3 * n])
    o = dc.sigmoid(z[..., 3 * n : 4 * n])
    c_next = f * c + i * g
    h_next = o * dc.tanh(c_next)
    return h_next, c_next


def run_masked(
    cell: LSTMCell,
    inputs: List[Tensor],
    lengths: np.ndarray,
    state: Tuple[Tensor, Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Run padded sequences; each row's state freezes after its last step."""
    batch = len(lengths)
    h, c = state if state is not None else cell.zero_state(batch)
    for t, x in enumerate(inputs):
        h_next, c_next = cell.step(x, h, c)
        live = (lengths > t).astype(float)[:, None]
        if live.all():
            h, c = h_next, c_next
        else:
            h = live * h_next + (1.0 - live) * h
            c = live * c_next + (1.0 - live) * c
    return h, c


def pad_sequences(sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    padded = np.zeros((len(sequences), int(lengths.max(initial=0))), dtype=np.int64)
    for row, seq in enumerate(sequences):
        padded[row, : len(seq)] = seq
    return padded, lengths


class TextEncoder:
    """Shared word embedding + LSTM with separate global/phrase projections."""

    def __init__(
        self,
        store: ParamStore,
        vocab_size: int,
        word_dim: int = 32,
        hidden_dim: int = 64,
        dim: int = 64,
        use_global: bool = True,
        use_local: bool = True,
        prefix: str = "text",
    ):
        self.vocab_size = vocab_size
        self.word_dim = word_dim
        self.embedding = store.glorot(f"{prefix}.embed.W_e", (vocab_size, word_dim))
        self.lstm = LSTMCell(store, word_dim, hidden_dim, f"{prefix}.lstm")
        self.w_g = self.b_g = self.w_l = self.b_l = None
        if use_global:
            self.w_g = store.glorot(f"{prefix}.global.W_g", (dim, hidden_dim))
            self.b_g = store.zeros(f"{prefix}.global.b_g", (dim,))
        if use_local:
            self.w_l = store.glorot(f"{prefix}.local.W_l", (dim, hidden_dim))
            self.b_l = store.zeros(f"{prefix}.local.b_l", (dim,))
        self.locked = False

    def embed(self, indices: Sequence[int]) -> Tensor:
        return dc.take(self.embedding, indices)

    def final_hidden(self, sequences: Sequence[Sequence[int]]) -> Tensor:
        if self.locked:
            raise VerificationError("text encoder invoked on an image-only path")
        if not sequences or any(len(s) == 0 for s in sequences):
            raise ConfigError("empty description")
        padded, lengths = pad_sequences(sequences)
        inputs = [self.embed(padded[:, t]) for t in range(padded.shape[1])]
        h, _ = run_masked(self.lstm, inputs, lengths)
        return h

    def encode_texts(self, sequences: Sequence[Sequence[int]]) -> Tensor:
        if self.w_g is None:
            raise ConfigError("model has no global text projection")
        return dc.linear(self.final_hidden(sequences), self.w_g, self.b_g)

    def encode_phrases(self, sequences: Sequence[Sequence[int]]) -> Tensor:
        if self.w_l is None:
            raise ConfigError("model has no phrase projection")
        return dc.linear(self.final_hidden(sequences), self.w_l, self.b_l)


def encode_text(tokens: Sequence[TokenT], vocab: Vocab, encoder: TextEncoder) -> Tensor:
    if not tokens:
        raise ConfigError("empty description")
    return encoder.encode_texts([encode(tokens, vocab)])[0]


def encode_phrase(tokens: Sequence[TokenT], vocab: Vocab, encoder: TextEncoder) -> Tensor:
    if not tokens:
        raise ConfigError("empty description")
    return encoder.encode_phrases([encode(tokens, vocab)])[0]
