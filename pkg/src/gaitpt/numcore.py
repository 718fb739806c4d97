"""Dense tensors with reverse-mode automatic differentiation.

Every model computation in this package is built from the primitives here.
A ``GradTape`` records primitive applications in execution order; ``backward``
replays the record in reverse, accumulating vector-Jacobian products onto the
``requires_grad`` leaves. ``grad_check`` provides the central-finite-difference
oracle used throughout the test suite.

Training runs in float32 by default; gradient checks require float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, NumericError, ShapeError

_SUPPORTED_DTYPES = (np.float32, np.float64)


class GradTape:
    """Ordered record of primitive ops, replayable in reverse for adjoints.

    Use as a context manager; ops executed inside record themselves when any
    input requires a gradient. A tape is single-writer: never record onto one
    tape from two concurrent contexts. Replaying (see `backward`) consumes
    the record, releasing intermediate buffers as it walks.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    """One recorded primitive: output, inputs, and the VJP closure."""

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...], vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """A dense n-dimensional array of float32 or float64 scalars.

    ``data`` is a contiguous numpy buffer. Tensors are treated as immutable by
    every op in this module; new tensors are produced instead of mutating.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._tape: GradTape | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- operators ----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Parameter:
    """A named leaf tensor of a model; names are unique within a model."""

    name: str
    value: Tensor

    def __post_init__(self):
        self.value.requires_grad = True

    @property
    def grad(self) -> Tensor | None:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


# ---------------------------------------------------------------------------
# recording machinery
# ---------------------------------------------------------------------------

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Attach `out` to the active tape when any input tracks gradients."""
    tape = _active_tape()
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if tape is not None:
            tape._nodes.append(_Node(out, inputs, vjp))
            out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data / b.data)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def sqrt(a) -> Tensor:
    """Elementwise square root; the adjoint at 0 is taken to be 0."""
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    root = out.data

    def vjp(g):
        return (np.where(root > 0, 0.5 / np.where(root > 0, root, 1.0), 0.0) * g,)

    return _record(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log needs strictly positive input")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def gelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(np.asarray(2.0, dtype=x.dtype))))
    out = Tensor(x * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(np.asarray(2.0 * np.pi, dtype=x.dtype))
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    return _record(out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), vjp)


def tensor_slice(a, key) -> Tensor:
    """Basic indexing (ints, slices, tuples); gradient scatters back."""
    a = _as_tensor(a)
    out = Tensor(a.data[key])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] += g
        return (full,)

    return _record(out, (a,), vjp)


def index_select(a, axis: int, indices) -> Tensor:
    """Gather slices along `axis`; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(a.data, idx, axis=axis))
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        sel = [slice(None)] * len(shape)
        sel[axis] = idx
        np.add.at(full, tuple(sel), g)
        return (full,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.shape
    count = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; batch axes broadcast."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = Tensor(a.data @ b.data)
    except ValueError as e:  # batch extents not broadcastable
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from e

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """Affine map x @ w (+ b) over the last axis; w has shape (in, out)."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {w.shape}")
    flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, w)
    if b is not None:
        out = add(out, b)
    if x.ndim != 2:
        out = reshape(out, x.shape[:-1] + (w.shape[1],))
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rejects non-finite input."""
    x = _as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    x = _as_tensor(x)
    gain = _as_tensor(gain, x)
    bias = _as_tensor(bias, x)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm gain/bias must match last extent {x.shape[-1]}, "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = Tensor(xn * gain.data + bias.data)
    n = x.shape[-1]

    def vjp(g):
        dgain = (g * xn).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        dxn = g * gain.data
        dx = inv * (
            dxn
            - dxn.mean(axis=-1, keepdims=True)
            - xn * (dxn * xn).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), vjp)


@dataclass
class AttentionWeights:
    """Projection weights of one multi-head attention layer (all C x C)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    bo: Tensor | None = None


def multi_head_attention(tokens, weights: AttentionWeights, heads: int) -> Tensor:
    """Scaled dot-product attention over `heads` heads, concat + output proj.

    tokens: (batch, t, C) with C divisible by `heads`. Differentiable
    end-to-end because it is composed from recorded primitives.
    """
    tokens = _as_tensor(tokens)
    if tokens.ndim != 3:
        raise ShapeError(f"attention expects (batch, tokens, C), got {tokens.shape}")
    b, t, c = tokens.shape
    if heads < 1 or c % heads != 0:
        raise ConfigError(f"model width {c} is not divisible by head count {heads}")
    hd = c // heads

    def split(x):  # (b, t, C) -> (b, h, t, hd)
        return transpose(reshape(x, (b, t, heads, hd)), (0, 2, 1, 3))

    q = split(linear(tokens, weights.wq, weights.bq))
    k = split(linear(tokens, weights.wk, weights.bk))
    v = split(linear(tokens, weights.wv, weights.bv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # (b, h, t, hd)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, c))
    return linear(merged, weights.wo, weights.bo)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) onto every requires_grad leaf's .grad.

    `loss` must be a single-element tensor produced while a tape was active.
    Deterministic: identical forward passes yield identical gradients. The
    walk consumes the tape (intermediate buffers are freed as it goes), so
    each recorded graph supports one backward pass.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    backward_from(loss, np.ones_like(loss.data))


def backward_from(output: Tensor, cotangent: np.ndarray) -> None:
    """Vector-Jacobian product: propagate `cotangent` (d loss / d output)
    back from `output` onto the requires_grad leaves.

    Lets callers split one logical loss across several recorded subgraphs
    (gradients accumulate across calls), e.g. micro-batched training.
    """
    tape = output._tape
    if tape is None:
        raise ConfigError("backward: tensor was not produced under an active GradTape")
    if tape._consumed:
        raise ConfigError("backward: this tape's record was already consumed")
    tape._consumed = True
    cotangent = np.asarray(cotangent, dtype=output.dtype)
    if cotangent.shape != output.shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} != output shape {output.shape}")

    grads: dict[int, np.ndarray] = {id(output): cotangent}
    holders: dict[int, Tensor] = {}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is not None:
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = t
        # release the record as we go so peak memory stays near the forward pass
        node.out = node.inputs = node.vjp = None
    tape._nodes.clear()

    for key, t in holders.items():
        g = grads.get(key)
        if g is None:
            continue  # produced mid-tape, already consumed
        g = g.reshape(t.shape)
        t.grad = Tensor(g) if t.grad is None else Tensor(t.grad.data + g)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_err: float
    tol: float
    checked: int
    total: int
    worst_index: tuple[int, ...] = field(default=())

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued `f` at `x` to central
    differences (f(x+h e_i) - f(x-h e_i)) / 2h.

    Relative error per coordinate is |a-n| / max(1, |a|, |n|). Inputs must be
    float64. `sample` limits the check to that many randomly chosen
    coordinates (seeded through `rng`); default checks all of them.
    """
    if x.dtype != np.float64:
        raise ConfigError(f"grad_check requires float64 input, got {x.dtype}")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with GradTape():
        y = f(leaf)
        if not isinstance(y, Tensor) or y.size != 1:
            raise ShapeError("grad_check: f must return a scalar tensor")
        backward(y)
    analytic = (
        leaf.grad.data.reshape(-1) if leaf.grad is not None else np.zeros(x.size)
    )

    coords = np.arange(x.size)
    if sample is not None and sample < x.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(x.size, size=sample, replace=False)

    base = x.data.reshape(-1).copy()
    max_rel = 0.0
    worst = 0
    for i in coords:
        probe = base.copy()
        probe[i] = base[i] + h
        fp = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = base[i] - h
        fm = f(Tensor(probe.reshape(x.shape))).item()
        numeric = (fp - fm) / (2.0 * h)
        rel = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        if rel > max_rel:
            max_rel, worst = rel, int(i)

    return GradCheckReport(
        max_rel_err=float(max_rel),
        tol=tol,
        checked=len(coords),
        total=int(x.size),
        worst_index=tuple(np.unravel_index(worst, x.shape)),
    )
