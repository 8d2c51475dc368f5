"""Identity losses, global discriminative association, the ranking baseline
and local reconstructive association, plus their per-mode combination.

Every function builds on :mod:`lingrid.diffcore` ops, so running it inside
a :class:`~lingrid.diffcore.Tape` makes it differentiable end to end.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lingrid import diffcore as dc
from lingrid.diffcore import ParamStore, Tensor
from lingrid.encoders import FeatureMap, LSTMCell, pad_sequences, pool_neighbors
from lingrid.errors import ConfigError, VerificationError

logger = logging.getLogger(__name__)

LOSS_TERMS = ("L_I", "L_T", "L_dis", "L_rec", "L_rank")

MODE_TERMS: Dict[str, Tuple[str, ...]] = {
    "basel": ("L_I",),
    "rank1": ("L_I", "L_T", "L_rank"),
    "rank2": ("L_I", "L_T", "L_rank"),
    "GDA": ("L_I", "L_T", "L_dis"),
    "LRA": ("L_I", "L_rec"),
    "proposed": ("L_I", "L_T", "L_dis", "L_rec"),
}
MODES = tuple(MODE_TERMS)

WEIGHT_SUM_TOLERANCE = 1e-6


def check_mode(mode: str) -> Tuple[str, ...]:
    if mode not in MODE_TERMS:
        raise ConfigError(f"unknown mode {mode!r}, expected one of {list(MODES)}")
    return MODE_TERMS[mode]


@dataclass
class LossWeights:
    lambda_t: float = 0.1
    lambda_dis: float = 1.0
    lambda_rec: float = 1.0
    margin: float = 0.2

    def __post_init__(self):
        for name in ("lambda_t", "lambda_dis", "lambda_rec", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    def coefficient(self, term: str) -> float:
        return {
            "L_I": 1.0,
            "L_T": self.lambda_t,
            "L_dis": self.lambda_dis,
            "L_rec": self.lambda_rec,
            "L_rank": 1.0,
        }[term]


# heads


class ClassifierHead:
    """One weight row per training identity, no bias."""

    def __init__(self, store: ParamStore, name: str, num_classes: int, dim: int):
        self.num_classes = num_classes
        self.weight = store.glorot(name, (num_classes, dim))

    def logits(self, features: Tensor) -> Tensor:
        return dc.linear(features, self.weight)


class ScoreHead:
    def __init__(self, store: ParamStore, dim: int, prefix: str = "head.score"):
        self.w = store.glorot(f"{prefix}.w_s", (dim,))
        self.b = store.zeros(f"{prefix}.b_s", (1,))


class AttentionHead:
    def __init__(self, store: ParamStore, dim: int, prefix: str = "head.attention"):
        self.w = store.glorot(f"{prefix}.w_r", (dim,))
        self.b = store.zeros(f"{prefix}.b_r", (1,))


class PhraseDecoder:
    """LSTM phrase generator conditioned on an aggregated visual feature.

    The embedding table is the text encoder's; the LSTM is the decoder's own.
    """

    def __init__(
        self,
        store: ParamStore,
        embedding: Tensor,
        feature_dim: int,
        hidden_dim: int,
        prefix: str = "decoder",
    ):
        vocab_size, word_dim = embedding.shape
        self.embedding = embedding
        self.lstm = LSTMCell(store, word_dim, hidden_dim, f"{prefix}.lstm")
        self.proj_w = store.glorot(f"{prefix}.proj.W", (word_dim, feature_dim))
        self.proj_b = store.zeros(f"{prefix}.proj.b", (word_dim,))
        self.w_oh = store.glorot(f"{prefix}.W_oh", (vocab_size, hidden_dim))
        self.w_oe = store.glorot(f"{prefix}.W_oe", (vocab_size, word_dim))

    @property
    def feature_dim(self) -> int:
        return self.proj_w.shape[1]


# identity losses


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.shape != logits.shape[:1]:
        raise ConfigError(f"{len(labels)} labels for {logits.shape[0]} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"label out of range for {num_classes} identities: {labels.tolist()}")
    picked = dc.log_softmax(logits)[np.arange(len(labels)), labels]
    return -dc.mean(picked)


def id_loss_image(phi: Tensor, labels: Sequence[int], head: ClassifierHead) -> Tensor:
    return cross_entropy(head.logits(phi), labels)


def id_loss_text(theta_g: Tensor, labels: Sequence[int], head: ClassifierHead) -> Tensor:
    return cross_entropy(head.logits(theta_g), labels)


# global discriminative association


def joint_rep(psi_bar: Tensor, theta_g: Tensor) -> Tensor:
    psi_bar, theta_g = dc.as_tensor(psi_bar), dc.as_tensor(theta_g)
    if psi_bar.shape[-1] != theta_g.shape[-1]:
        raise ConfigError(
            f"joint_rep: feature dims differ {psi_bar.shape} vs {theta_g.shape}"
        )
    diff = psi_bar - theta_g
    return diff * diff


def relevance_logit(joint: Tensor, head: ScoreHead) -> Tensor:
    return dc.matmul(joint, head.w) + head.b[0]


def relevance_score(joint: Tensor, head: ScoreHead) -> Tensor:
    return dc.sigmoid(relevance_logit(joint, head))


def binary_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean BCE from logits, via log-sigmoid so saturated scores stay finite."""
    labels = np.asarray(labels, dtype=float)
    if labels.size == 0:
        raise ConfigError("no image-text pairs to score")
    per_pair = labels * dc.log_sigmoid(logits) + (1.0 - labels) * dc.log_sigmoid(-logits)
    return -dc.mean(per_pair)


def pair_logits(
    psi_bar: Tensor, theta_g: Tensor, pairs: np.ndarray, head: ScoreHead
) -> Tensor:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    joint = joint_rep(dc.take(psi_bar, pairs[:, 0]), dc.take(theta_g, pairs[:, 1]))
    return relevance_logit(joint, head)


# ranking baseline


def similarity_matrix(psi_bar: Tensor, theta_g: Tensor) -> Tensor:
    """Cosine similarities k[i, j] between image i and text j."""
    return dc.matmul(dc.l2_normalize(psi_bar), dc.transpose(dc.l2_normalize(theta_g)))


def rank_triples(identities: Sequence[int], variant: str) -> np.ndarray:
    """(anchor image, positive text, negative index) rows for the hinge sum."""
    identities = np.asarray(identities)
    same = identities[:, None] == identities[None, :]
    if variant == "rank1":
        positive = np.eye(len(identities), dtype=bool)
        negative = ~positive
    elif variant == "rank2":
        positive, negative = same, ~same
    else:
        raise ConfigError(f"unknown ranking variant {variant!r}")
    triples = [
        (a, b, j)
        for a, b in zip(*np.nonzero(positive))
        for j in np.flatnonzero(negative[a])
    ]
    return np.array(triples, dtype=np.int64).reshape(-1, 3)


def rank_hinge(
    k: Tensor, identities: Sequence[int], margin: float, variant: str = "rank1"
) -> Tensor:
    if margin < 0:
        raise ConfigError(f"ranking margin must be >= 0, got {margin}")
    triples = rank_triples(identities, variant)
    if len(triples) == 0:
        logger.warning("ranking loss: batch has no negative pairs, contributing 0")
        return Tensor(0.0)
    a, b, j = triples[:, 0], triples[:, 1], triples[:, 2]
    positive = k[a, b]
    image_side = dc.relu(k[a, j] - positive + margin)
    text_side = dc.relu(k[j, b] - positive + margin)
    return dc.mean(image_side + text_side)


# local reconstructive association


def attention_logits(bins: Tensor, theta_l: Tensor, head: AttentionHead) -> Tensor:
    """``bins`` (..., K', d) against ``theta_l`` (..., d), one logit per bin."""
    bins, theta_l = dc.as_tensor(bins), dc.as_tensor(theta_l)
    if bins.shape[-1] != theta_l.shape[-1]:
        raise ConfigError(
            f"attention: bin dim {bins.shape[-1]} != phrase dim {theta_l.shape[-1]}"
        )
    theta = dc.reshape(theta_l, theta_l.shape[:-1] + (1, theta_l.shape[-1]))
    diff = bins - theta
    return dc.matmul(diff * diff, head.w) + head.b[0]


def attention_weights(bins: Tensor, theta_l: Tensor, head: AttentionHead) -> Tensor:
    return dc.softmax(attention_logits(bins, theta_l, head), axis=-1)


def aggregate_feature(bins: Tensor, r: Tensor) -> Tensor:
    bins, r = dc.as_tensor(bins), dc.as_tensor(r)
    if r.shape[-1] != bins.shape[-2]:
        raise ConfigError(f"{r.shape[-1]} weights for {bins.shape[-2]} bins")
    totals = r.data.sum(axis=-1)
    if np.any(np.abs(totals - 1.0) > WEIGHT_SUM_TOLERANCE):
        raise VerificationError(f"attention weights sum to {totals}, expected 1")
    weights = dc.reshape(r, r.shape + (1,))
    return dc.sum(weights * bins, axis=-2)


def decode_nll(
    psi_hat: Tensor, targets: Sequence[Sequence[int]], decoder: PhraseDecoder
) -> Tensor:
    """Per-phrase NLL for a batch of ``[<start>, w_1..w_M, <end>]`` index lists.

    Step 0 feeds the projected visual feature from a zero state; step m + 1
    feeds the embedding of token m and scores token m + 1.
    """
    if psi_hat.shape[-1] != decoder.feature_dim:
        raise ConfigError(
            f"decoder expects {decoder.feature_dim}-d features, got {psi_hat.shape}"
        )
    if any(len(t) < 3 for t in targets):
        raise ConfigError("phrase must hold at least one word between boundaries")
    padded, lengths = pad_sequences(targets)
    rows = np.arange(len(targets))

    h, c = decoder.lstm.zero_state(len(targets))
    x0 = dc.linear(psi_hat, decoder.proj_w, decoder.proj_b)
    h, c = decoder.lstm.step(x0, h, c)

    nll: Optional[Tensor] = None
    for m in range(padded.shape[1] - 1):
        e = dc.take(decoder.embedding, padded[:, m])
        h, c = decoder.lstm.step(e, h, c)
        logits = dc.linear(h, decoder.w_oh) + dc.linear(e, decoder.w_oe)
        picked = dc.log_softmax(logits)[rows, padded[:, m + 1]]
        live = (lengths - 1 > m).astype(float)
        step = -(picked * live)
        nll = step if nll is None else nll + step
    return nll


def decode_phrase_nll(
    psi_hat: Tensor, indices: Sequence[int], decoder: PhraseDecoder
) -> Tensor:
    psi_hat = dc.as_tensor(psi_hat)
    return decode_nll(dc.reshape(psi_hat, (1, psi_hat.shape[-1])), [indices], decoder)[0]


def reconstruction_weights(phrase_owner: Sequence[int], num_tuples: int) -> np.ndarray:
    """Weight of each phrase NLL in the mean over phrase-bearing tuples."""
    owner = np.asarray(phrase_owner, dtype=np.int64)
    counts = np.bincount(owner, minlength=num_tuples)
    bearing = int((counts > 0).sum())
    return 1.0 / (counts[owner] * bearing)


def reconstruction_loss(
    phrase_nll: Tensor, phrase_owner: Sequence[int], num_tuples: int
) -> Tensor:
    if len(phrase_owner) == 0:
        logger.warning("no tuple in the batch has phrases, reconstruction loss is 0")
        return Tensor(0.0)
    weights = reconstruction_weights(phrase_owner, num_tuples)
    return dc.sum(phrase_nll * weights)


# batch level


@dataclass
class BatchFeatures:
    """Encoder outputs for one :class:`~lingrid.batching.BatchPlan`."""

    fmap: FeatureMap
    psi_bar: Tensor
    phi: Tensor
    theta_g: Optional[Tensor] = None  # one row per text of the pool


def forward_batch(batch, model, with_text: bool = True) -> BatchFeatures:
    fmap, psi_bar, phi = model.visual.encode(Tensor(batch.images))
    theta_g = None
    if with_text and model.text is not None and model.text.w_g is not None:
        theta_g = model.text.encode_texts(batch.texts)
    return BatchFeatures(fmap, psi_bar, phi, theta_g)


def _features(batch, model, feats: Optional[BatchFeatures]) -> BatchFeatures:
    return feats if feats is not None else forward_batch(batch, model)


def loss_dis(batch, model, feats: Optional[BatchFeatures] = None) -> Tensor:
    if batch.num_pairs == 0:
        raise ConfigError("no image-text pairs to score")
    feats = _features(batch, model, feats)
    logits = pair_logits(feats.psi_bar, feats.theta_g, batch.pairs, model.score_head)
    return binary_cross_entropy(logits, batch.pairs[:, 2])


def loss_rank(
    batch,
    model,
    margin: float,
    variant: str = "rank1",
    feats: Optional[BatchFeatures] = None,
) -> Tensor:
    feats = _features(batch, model, feats)
    n = len(batch)
    k = similarity_matrix(feats.psi_bar, feats.theta_g[0:n])
    return rank_hinge(k, batch.identities, margin, variant)


def loss_rec(batch, model, feats: Optional[BatchFeatures] = None) -> Tensor:
    sequences: List[List[int]] = []
    owners: List[int] = []
    for n, phrase_set in enumerate(batch.phrases):
        for phrase in phrase_set:
            sequences.append(list(phrase))
            owners.append(n)
    if not sequences:
        return reconstruction_loss(Tensor(np.zeros(0)), owners, len(batch))

    feats = _features(batch, model, feats)
    pooled = pool_neighbors(feats.fmap, model.pool_window)
    bins = dc.take(pooled.bins, owners)
    theta_l = model.text.encode_phrases(sequences)
    r = attention_weights(bins, theta_l, model.attention)
    psi_hat = aggregate_feature(bins, r)
    start, end = model.boundary_tokens
    targets = [[start] + s + [end] for s in sequences]
    nll = decode_nll(psi_hat, targets, model.decoder)
    return reconstruction_loss(nll, owners, len(batch))


def total_loss(
    batch, model, weights: LossWeights, mode: str
) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted loss for ``mode`` and a breakdown of all five terms."""
    terms = check_mode(mode)
    with_text = any(t in terms for t in ("L_T", "L_dis", "L_rank"))
    feats = forward_batch(batch, model, with_text=with_text)
    n = len(batch)

    values: Dict[str, Tensor] = {
        "L_I": id_loss_image(feats.phi, batch.labels, model.image_head)
    }
    if "L_T" in terms:
        values["L_T"] = id_loss_text(feats.theta_g[0:n], batch.labels, model.text_head)
    if "L_dis" in terms:
        values["L_dis"] = loss_dis(batch, model, feats)
    if "L_rank" in terms:
        values["L_rank"] = loss_rank(batch, model, weights.margin, mode, feats)
    if "L_rec" in terms:
        values["L_rec"] = loss_rec(batch, model, feats)

    total = values["L_I"]
    for term in terms[1:]:
        total = total + dc.scale(values[term], weights.coefficient(term))

    breakdown = {t: (values[t].item() if t in values else 0.0) for t in LOSS_TERMS}
    breakdown["total"] = total.item()
    return total, breakdown
