"""Reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it in
execution order; :meth:`Tape.backward` walks that list in reverse. Outside a
tape every op is a plain numpy evaluation, which is what evaluation and
finite differencing use.
"""
import itertools
import logging
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from lingrid.errors import ConfigError

logger = logging.getLogger(__name__)

SINGLE = np.float32
DOUBLE = np.float64

_DTYPES: List[type] = [SINGLE]
_TAPES: List["Tape"] = []

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def get_dtype() -> type:
    return _DTYPES[-1]


@contextmanager
def precision(dtype) -> Iterator[None]:
    _DTYPES.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPES.pop()


def double_precision():
    return precision(DOUBLE)


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = None):
        self.data = np.array(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.parents: Tuple["Tensor", ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class Parameter(Tensor):
    """A named leaf whose gradient survives the backward pass."""

    def __init__(self, data: ArrayLike, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """The computation record of one forward pass."""

    def __init__(self):
        self.nodes: List[Tensor] = []
        self.leaves: Dict[int, Parameter] = {}
        self._ids = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)
        self._ids.add(id(node))
        for parent in node.parents:
            if isinstance(parent, Parameter):
                self.leaves.setdefault(id(parent), parent)

    def backward(
        self, loss: Tensor, params: Iterable[Parameter] = ()
    ) -> Dict[str, np.ndarray]:
        if loss.size != 1:
            raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
        params = list(params)
        for node in self.nodes:
            node.grad = None
        for leaf in itertools.chain(self.leaves.values(), params):
            leaf.zero_grad()

        if loss.requires_grad:
            if id(loss) not in self._ids:
                raise ConfigError("loss was not produced in the current record")
            loss.grad = np.ones_like(loss.data)
            for node in reversed(self.nodes):
                if node.grad is not None:
                    node.backward_fn(node.grad)

        return {p.name: p.grad for p in params}


def current_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor, params: Iterable[Parameter] = ()) -> Dict[str, np.ndarray]:
    tape = current_tape()
    if tape is None:
        raise ConfigError("backward called outside of a computation record")
    return tape.backward(loss, params)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x: ArrayLike) -> Tensor:
    return Tensor(x)


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result, recording it when a tape is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out.parents = ()
    out.backward_fn = None
    tape = current_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = unbroadcast(np.asarray(g), t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)

    def backward_fn(g):
        accumulate(a, g)
        accumulate(b, g)

    return from_op(a.data + b.data, (a, b), backward_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)

    def backward_fn(g):
        accumulate(a, g)
        accumulate(b, -g)

    return from_op(a.data - b.data, (a, b), backward_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Hadamard product (with the broadcasting bias/mask terms need)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)

    def backward_fn(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return from_op(a.data * b.data, (a, b), backward_fn)


hadamard = mul


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        accumulate(a, g * c)

    return from_op(a.data * a.data.dtype.type(c), (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward_fn(g):
        accumulate(a, g * out * (1.0 - out))

    return from_op(out, (a,), backward_fn)


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = -np.logaddexp(0.0, -x).astype(x.dtype)

    def backward_fn(g):
        e = np.exp(-np.abs(x))
        sig_neg = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        accumulate(a, g * sig_neg)

    return from_op(out, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward_fn(g):
        accumulate(a, g * (1.0 - out * out))

    return from_op(out, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward_fn(g):
        accumulate(a, g * (a.data > 0))

    return from_op(out, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return from_op(out, (a,), backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return from_op(out, (a,), backward_fn)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    out = a.data / norm

    def backward_fn(g):
        accumulate(a, (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm)

    return from_op(out, (a,), backward_fn)


# reductions and shape plumbing


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g, a.shape))

    return from_op(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward_fn(g):
        accumulate(a, g.reshape(a.shape))

    return from_op(a.data.reshape(shape), (a,), backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ConfigError(f"transpose expects a matrix, got shape {a.shape}")

    def backward_fn(g):
        accumulate(a, g.T)

    return from_op(a.data.T, (a,), backward_fn)


def _is_basic_key(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(
        k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer))
        for k in key
    )


def index(a: Tensor, key) -> Tensor:
    basic = _is_basic_key(key)

    def backward_fn(g):
        z = np.zeros_like(a.data)
        if basic:
            z[key] += g
        else:
            np.add.at(z, key, g)
        accumulate(a, z)

    return from_op(np.array(a.data[key]), (a,), backward_fn)


def take(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Row lookup ``table[indices]`` (word embeddings, per-pair gathers)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ConfigError(
            f"take: index out of range for table of shape {table.shape}"
        )
    return index(table, indices)


# products


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., n) and ``b`` of shape (n,) or (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ConfigError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    n = b.shape[0]

    def backward_fn(g):
        if b.ndim == 1:
            accumulate(a, g[..., None] * b.data)
            accumulate(b, (a.data * g[..., None]).reshape(-1, n).sum(axis=0))
        else:
            accumulate(a, g @ b.data.T)
            accumulate(b, a.data.reshape(-1, n).T @ g.reshape(-1, b.shape[1]))

    return from_op(a.data @ b.data, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ConfigError(f"linear: shape mismatch {x.shape} vs {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        accumulate(x, g @ weight.data)
        accumulate(weight, g2.T @ x.data.reshape(-1, weight.shape[1]))
        if bias is not None:
            accumulate(bias, g2.sum(axis=0))

    return from_op(out, parents, backward_fn)


def bin_project(mixing: np.ndarray, x: Tensor) -> Tensor:
    """Apply a constant (K', K) mixing matrix over the bin axis of (B, K, d)."""
    if x.ndim != 3 or mixing.shape[1] != x.shape[1]:
        raise ConfigError(f"bin_project: shape mismatch {mixing.shape} vs {x.shape}")
    mixing = mixing.astype(x.data.dtype)

    def backward_fn(g):
        accumulate(x, mixing.T @ g)

    return from_op(mixing @ x.data, (x,), backward_fn)


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """NHWC convolution, ``weight`` of shape (kh, kw, c_in, c_out)."""
    kh, kw, cin, cout = weight.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ConfigError(f"conv2d: shape mismatch {x.shape} vs {weight.shape}")
    pad = ((0, 0), (padding, padding), (padding, padding), (0, 0))
    xp = np.pad(x.data, pad)
    batch, hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")

    def window(i, j):
        return (
            slice(None),
            slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride),
            slice(None),
        )

    cols = np.empty((batch, ho, wo, kh, kw, cin), dtype=xp.dtype)
    for i, j in itertools.product(range(kh), range(kw)):
        cols[:, :, :, i, j, :] = xp[window(i, j)]
    cols = cols.reshape(batch * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(batch, ho, wo, cout) + bias.data

    def backward_fn(g):
        g2 = g.reshape(-1, cout)
        accumulate(weight, (cols.T @ g2).reshape(weight.shape))
        accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(batch, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i, j in itertools.product(range(kh), range(kw)):
                gxp[window(i, j)] += gcols[:, :, :, i, j, :]
            accumulate(x, gxp[:, padding : hp - padding, padding : wp - padding, :])

    return from_op(out, (x, weight, bias), backward_fn)


# parameters


def glorot_bound(shape: Tuple[int, ...]) -> float:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        fan_in, fan_out = shape[0], 1
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParamStore:
    """Ordered, uniquely named parameters of one model."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: Dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ConfigError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param

    def glorot(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        bound = glorot_bound(shape)
        return self.add(Parameter(self.rng.uniform(-bound, bound, size=shape), name))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return self.add(Parameter(np.zeros(shape), name))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter names differ: {sorted(missing)}")
        for name, value in state.items():
            param = self._params[name]
            if param.shape != tuple(value.shape):
                raise ConfigError(
                    f"{name}: checkpoint shape {tuple(value.shape)} "
                    f"vs model shape {param.shape}"
                )
            param.data = np.array(value, dtype=param.data.dtype)
            param.zero_grad()

    def zero_grad(self) -> None:
        for param in self:
            param.zero_grad()
