"""Central-difference verification of analytic gradients.

Everything here runs in double precision; checked points and parameters are
restored exactly after each perturbation.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from lingrid import diffcore as dc
from lingrid.association import (
    id_loss_image,
    id_loss_text,
    loss_dis,
    loss_rank,
    loss_rec,
)
from lingrid.batching import BatchPlan
from lingrid.diffcore import Parameter, Tape, Tensor, double_precision
from lingrid.network import LinGridModel, ModelDims
from lingrid.textpipe import SPECIALS, Vocab

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
EPSILON = 1e-6

ScalarFn = Callable[[Tensor], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def grad_check(
    fn: ScalarFn,
    point: np.ndarray,
    epsilon: float = EPSILON,
    coords: Optional[Iterable[Tuple[int, ...]]] = None,
) -> float:
    """Max relative error between backward and central differences of ``fn``."""
    with double_precision():
        point = np.array(point, dtype=np.float64)
        x = Parameter(point, "x")
        with Tape() as tape:
            analytic = tape.backward(fn(x), [x])["x"].copy()

        errors = []
        for idx in coords if coords is not None else np.ndindex(point.shape):
            shifted = point.copy()
            shifted[idx] = point[idx] + epsilon
            f_plus = fn(Tensor(shifted)).item()
            shifted[idx] = point[idx] - epsilon
            f_minus = fn(Tensor(shifted)).item()
            numeric = (f_plus - f_minus) / (2 * epsilon)
            errors.append(relative_error(analytic[idx], numeric))
    return float(max(errors, default=0.0))


def sample_coords(shape: Tuple[int, ...], count: int, rng: np.random.Generator) -> List[tuple]:
    flat = int(np.prod(shape)) if shape else 1
    picks = rng.choice(flat, size=min(count, flat), replace=False)
    return [np.unravel_index(int(i), shape) if shape else () for i in picks]


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    rng: np.random.Generator,
    coords_per_param: int = 3,
    epsilon: float = EPSILON,
) -> Dict[str, float]:
    """Per-parameter worst relative error on a few sampled coordinates."""
    with Tape() as tape:
        grads = {k: v.copy() for k, v in tape.backward(loss_fn(), params).items()}

    worst = {}
    for p in params:
        errors = []
        for idx in sample_coords(p.shape, coords_per_param, rng):
            original = p.data[idx].copy()
            p.data[idx] = original + epsilon
            f_plus = loss_fn().item()
            p.data[idx] = original - epsilon
            f_minus = loss_fn().item()
            p.data[idx] = original
            numeric = (f_plus - f_minus) / (2 * epsilon)
            errors.append(relative_error(grads[p.name][idx], numeric))
        worst[p.name] = float(max(errors, default=0.0))
        p.zero_grad()
    return worst


# op catalogue, each builder draws its constants once per trial


def _projected(op: ScalarFn, rng: np.random.Generator) -> ScalarFn:
    """Reduce ``op``'s output to a scalar with fixed random weights."""
    cache: Dict[str, np.ndarray] = {}

    def fn(x: Tensor) -> Tensor:
        out = op(x)
        if "w" not in cache:
            cache["w"] = rng.normal(size=out.shape)
        return dc.sum(out * cache["w"])

    return fn


def _op_cases(rng: np.random.Generator) -> Dict[str, Tuple[ScalarFn, Tuple[int, ...]]]:
    c34 = rng.normal(size=(3, 4))
    c4 = rng.normal(size=(4,))
    w45 = rng.normal(size=(5, 4))
    b5 = rng.normal(size=(5,))
    w_conv = rng.normal(size=(3, 3, 2, 3))
    b_conv = rng.normal(size=(3,))
    mixing = np.abs(rng.normal(size=(2, 3)))
    rows = rng.integers(0, 3, size=5)
    return {
        "add": (lambda x: x + c34, (3, 4)),
        "sub": (lambda x: c34 - x, (3, 4)),
        "mul": (lambda x: x * c34, (3, 4)),
        "hadamard_self": (lambda x: x * x, (3, 4)),
        "scale": (lambda x: dc.scale(x, -1.7), (3, 4)),
        "sigmoid": (dc.sigmoid, (3, 4)),
        "log_sigmoid": (dc.log_sigmoid, (3, 4)),
        "tanh": (dc.tanh, (3, 4)),
        "relu": (dc.relu, (3, 4)),
        "softmax": (lambda x: dc.softmax(x, axis=-1), (3, 4)),
        "log_softmax": (lambda x: dc.log_softmax(x, axis=-1), (3, 4)),
        "l2_normalize": (dc.l2_normalize, (3, 4)),
        "sum_axis": (lambda x: dc.sum(x, axis=0), (3, 4)),
        "mean_axis": (lambda x: dc.mean(x, axis=1), (3, 4)),
        "reshape": (lambda x: dc.reshape(x, (4, 3)) * c34.T, (3, 4)),
        "transpose": (dc.transpose, (3, 4)),
        "index": (lambda x: x[1:, ::2], (3, 4)),
        "take": (lambda x: dc.take(x, rows), (3, 4)),
        "matmul_vec": (lambda x: dc.matmul(x, c4), (3, 4)),
        "matmul_mat": (lambda x: dc.matmul(x, w45.T), (3, 4)),
        "linear": (lambda x: dc.linear(x, dc.constant(w45), dc.constant(b5)), (3, 4)),
        "bin_project": (lambda x: dc.bin_project(mixing, x), (2, 3, 4)),
        "conv2d": (
            lambda x: dc.conv2d(x, dc.constant(w_conv), dc.constant(b_conv), 2, 1),
            (1, 5, 4, 2),
        ),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def check_ops(rng: np.random.Generator, trials: int = 20) -> Dict[str, float]:
    worst = {name: 0.0 for name in OP_NAMES}
    with double_precision():
        for _ in range(trials):
            for name, (op, shape) in _op_cases(rng).items():
                point = rng.normal(size=shape)
                err = grad_check(_projected(op, rng), point)
                worst[name] = max(worst[name], err)
    return worst


# losses on a micro model


def micro_vocab(size: int = 12) -> Vocab:
    return Vocab(list(SPECIALS) + [f"w{i}" for i in range(size - len(SPECIALS))])


def micro_model(seed: int = 0) -> LinGridModel:
    vocab = micro_vocab()
    dims = ModelDims(
        vocab_size=len(vocab),
        num_classes=3,
        input_size=(32, 16),
        conv_widths=[3, 4, 4],
        embed_dim=6,
        out_dim=5,
        word_dim=4,
        hidden_dim=5,
        pool_window=(2, 1),
    )
    return LinGridModel(dims, "proposed", vocab, seed=seed)


def micro_batch(
    rng: np.random.Generator, model: LinGridModel, identities: Sequence[int] = (0, 0, 1, 2)
) -> BatchPlan:
    """Random images and word sequences with every same/different pair scored."""
    n = len(identities)
    height, width = model.visual.input_size
    lo, hi = len(SPECIALS), model.dims.vocab_size

    def words(length: int) -> List[int]:
        return [int(w) for w in rng.integers(lo, hi, size=length)]

    identities = np.array(identities, dtype=np.int64)
    pairs = [
        (i, j, int(identities[i] == identities[j])) for i in range(n) for j in range(n)
    ]
    return BatchPlan(
        tuples=[None] * n,
        images=rng.uniform(0.0, 1.0, size=(n, height, width, 3)),
        labels=identities.copy(),
        identities=identities,
        texts=[words(int(rng.integers(2, 6))) for _ in range(n)],
        text_identities=identities.copy(),
        phrases=[
            [words(int(rng.integers(1, 4))) for _ in range(int(rng.integers(0, 3)))]
            for _ in range(n)
        ],
        pairs=np.array(pairs, dtype=np.int64),
    )


def loss_terms(model, margin: float = 0.2) -> Dict[str, Callable[[BatchPlan], Tensor]]:
    def l_i(batch):
        return id_loss_image(model.image_features(batch.images)[2], batch.labels, model.image_head)

    def l_t(batch):
        theta = model.text.encode_texts(batch.texts)
        return id_loss_text(theta, batch.labels, model.text_head)

    return {
        "L_I": l_i,
        "L_T": l_t,
        "L_dis": lambda batch: loss_dis(batch, model),
        "L_rank1": lambda batch: loss_rank(batch, model, margin, "rank1"),
        "L_rank2": lambda batch: loss_rank(batch, model, margin, "rank2"),
        "L_rec": lambda batch: loss_rec(batch, model),
    }


def check_losses(
    rng: np.random.Generator, batches: int = 10, coords_per_param: int = 3
) -> Dict[str, float]:
    worst: Dict[str, float] = {}
    with double_precision():
        model = micro_model(seed=int(rng.integers(2**31)))
        # biases start at zero, move them off it
        for p in model.parameters:
            if not p.data.any():
                p.data = rng.normal(scale=0.1, size=p.shape)
        terms = loss_terms(model)
        for _ in range(batches):
            batch = micro_batch(rng, model)
            if not any(batch.phrases):
                batch.phrases[0] = [[len(SPECIALS)]]
            for name, term in terms.items():
                errors = check_parameters(
                    lambda: term(batch), model.parameters, rng, coords_per_param
                )
                worst[name] = max(worst.get(name, 0.0), max(errors.values()))
    return worst


@dataclass
class GradcheckReport:
    ops: Dict[str, float] = field(default_factory=dict)
    losses: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> List[str]:
        entries = list(self.ops.items()) + list(self.losses.items())
        return [name for name, err in entries if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> List[str]:
        out = []
        for kind, entries in (("op", self.ops), ("loss", self.losses)):
            for name, err in entries.items():
                status = "ok" if err <= self.tolerance else "FAIL"
                out.append(f"{kind:<5}{name:<16}{err:.3e}  {status}")
        return out


def run_suite(seed: int = 0, op_trials: int = 20, loss_batches: int = 10) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    report = GradcheckReport()
    report.ops = check_ops(rng, op_trials)
    report.losses = check_losses(rng, loss_batches)
    report.seconds = time.perf_counter() - start
    logger.info(f"gradcheck finished in {report.seconds:.1f}s")
    return report
