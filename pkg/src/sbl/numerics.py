"""Dense float64 tensors, define-by-run reverse-mode autodiff, and Adam.

Every differentiable primitive lives in ``OPS`` as a forward/backward pair.
``backward`` looks the rule up at call time, which lets the gradient checker
enumerate the registry and lets tests swap in a broken rule on purpose.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "ctx", "id", "_consumed")

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: Any = None
        # Creation order doubles as a topological index: parents always exist first.
        self.id = next(_node_ids)
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def parameter(data: Any) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[Any, np.ndarray], Sequence[np.ndarray | None]]


OPS: dict[str, Op] = {}


def defop(name: str, forward, backward) -> None:
    OPS[name] = Op(name, forward, backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(name: str, *inputs, **kwargs) -> Tensor:
    tensors = tuple(_as_tensor(x) for x in inputs)
    out, ctx = OPS[name].forward(*(t.data for t in tensors), **kwargs)
    result = Tensor(out)
    if _grad_enabled and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result.op = name
        result.parents = tensors
        result.ctx = ctx
    return result


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Intermediate graph state is released afterwards, so a second call on the
    same loss raises. Leaves listed in ``inputs`` that the loss does not
    reach get an explicit zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; rebuild it before calling again")
    loss._consumed = True

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes or not t.requires_grad:
            continue
        nodes[t.id] = t
        stack.extend(t.parents)

    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        t = nodes[node_id]
        g = pending.pop(node_id, None)
        if g is None:
            continue
        if t.op is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = OPS[t.op].backward(t.ctx, g)
        for parent, pg in zip(t.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"backward rule of {t.op!r} produced gradient {pg.shape} "
                    f"for input of shape {parent.data.shape}"
                )
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg
        t.ctx = None
        t.parents = ()

    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def _add_fwd(a, b):
    _broadcast_shape(a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _broadcast_shape(a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _mul_fwd(a, b):
    _broadcast_shape(a, b)
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, c):
    return a * c, c


def _scale_bwd(c, g):
    return (g * c,)


def _relu_fwd(a):
    keep = a > 0
    return np.where(keep, a, 0.0), keep


def _relu_bwd(keep, g):
    return (np.where(keep, g, 0.0),)


defop("add", _add_fwd, _add_bwd)
defop("sub", _sub_fwd, _sub_bwd)
defop("mul", _mul_fwd, _mul_bwd)
defop("scale", _scale_fwd, _scale_bwd)
defop("relu", _relu_fwd, _relu_bwd)


def add(a, b) -> Tensor:
    return apply("add", a, b)


def sub(a, b) -> Tensor:
    return apply("sub", a, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def scale(a, c: float) -> Tensor:
    return apply("scale", a, c=float(c))


def relu(a) -> Tensor:
    return apply("relu", a)


# ---------------------------------------------------------------------------
# linear algebra and shape


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return np.matmul(a, b), (a, b)


def _matmul_bwd(ctx, g):
    a, b = ctx
    if b.ndim == 2 and a.ndim > 2:
        # (..., m, k) @ (k, n): fold the batch into rows for the weight gradient.
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), a.shape
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None


def _reshape_bwd(shape, g):
    return (g.reshape(shape),)


def _transpose_fwd(a, axes):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return np.transpose(a, axes), axes


def _transpose_bwd(axes, g):
    return (np.transpose(g, np.argsort(axes)),)


def _sum_fwd(a, axis, keepdims):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _sum_bwd(ctx, g):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(a, axis, keepdims):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return a.mean(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, n)


def _mean_bwd(ctx, g):
    shape, axis, keepdims, n = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, shape).copy(),)


def _take_fwd(a, index):
    return a[index], (a.shape, index)


def _take_bwd(ctx, g):
    shape, index = ctx
    out = np.zeros(shape, dtype=DTYPE)
    np.add.at(out, index, g)
    return (out,)


defop("matmul", _matmul_fwd, _matmul_bwd)
defop("reshape", _reshape_fwd, _reshape_bwd)
defop("transpose", _transpose_fwd, _transpose_bwd)
defop("sum", _sum_fwd, _sum_bwd)
defop("mean", _mean_fwd, _mean_bwd)
defop("take", _take_fwd, _take_bwd)


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def reshape(a, shape) -> Tensor:
    return apply("reshape", a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return apply("transpose", a, axes=None if axes is None else tuple(axes))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return apply("mean", a, axis=axis, keepdims=keepdims)


def take(a, index) -> Tensor:
    """Advanced indexing ``a[index]``; repeated indices accumulate gradient."""
    return apply("take", a, index=index)


# ---------------------------------------------------------------------------
# time reversal


def reversal_index(n_steps: int, lengths: np.ndarray) -> np.ndarray:
    """Per-row source index of a length-aware reversal; tail steps map to themselves."""
    return _reversal_index(n_steps, np.asarray(lengths, dtype=np.int64))


def _reversal_index(n_steps: int, lengths: np.ndarray) -> np.ndarray:
    steps = np.arange(n_steps)[None, :]
    lengths = lengths[:, None]
    return np.where(steps < lengths, lengths - 1 - steps, steps)


def _reverse_fwd(a, lengths):
    if a.ndim < 2:
        raise ShapeError(f"reverse_time needs a (..., T, d) tensor, got {a.shape}")
    if lengths is None:
        return a[..., ::-1, :].copy(), None
    if a.ndim != 3 or lengths.shape != (a.shape[0],):
        raise ShapeError(f"lengths {lengths.shape} do not index batch of {a.shape}")
    if np.any(lengths < 1) or np.any(lengths > a.shape[1]):
        raise ShapeError("reverse_time lengths out of range")
    idx = _reversal_index(a.shape[1], lengths)
    return np.take_along_axis(a, idx[:, :, None], axis=1), idx


def _reverse_bwd(idx, g):
    if idx is None:
        return (g[..., ::-1, :].copy(),)
    # The permutation is an involution, so it is its own transpose.
    return (np.take_along_axis(g, idx[:, :, None], axis=1),)


defop("reverse_time", _reverse_fwd, _reverse_bwd)


def reverse_time(x, lengths: np.ndarray | None = None) -> Tensor:
    """Reverse the row (time) order of a ``(..., T, d)`` tensor.

    With ``lengths`` (one per batch row of a ``(B, T, d)`` tensor) only the
    first ``lengths[b]`` steps are reversed and the tail stays in place.
    """
    if lengths is not None:
        lengths = np.asarray(lengths, dtype=np.int64)
    return apply("reverse_time", x, lengths=lengths)


# ---------------------------------------------------------------------------
# normalisation and probabilities


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_fwd(a, axis):
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of {a.shape}")
    y = _softmax(a, axis)
    return y, (y, axis)


def _softmax_bwd(ctx, g):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_fwd(a, axis):
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of {a.shape}")
    shifted = a - a.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return out, (out, axis)


def _log_softmax_bwd(ctx, g):
    out, axis = ctx
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def _layer_norm_fwd(x, gain, bias, eps):
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over a zero-width feature axis")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def _layer_norm_bwd(ctx, g):
    xhat, inv_std, gain = ctx
    dxhat = g * gain
    dx = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(g.ndim - 1))
    return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def _masked_fill_fwd(a, keep, value):
    shape = _broadcast_shape(a, keep)
    if shape != a.shape:
        raise ShapeError(f"mask {keep.shape} does not match scores {a.shape}")
    return np.where(keep, a, value), keep


def _masked_fill_bwd(keep, g):
    return (np.where(keep, g, 0.0),)


def _cross_entropy_fwd(logits, targets, mask):
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross-entropy over a fully masked target")
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"targets {targets.shape} / mask {mask.shape} vs logits {logits.shape}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count
    return np.asarray(loss), (logp, targets, mask, count)


def _cross_entropy_bwd(ctx, g):
    logp, targets, mask, count = ctx
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    return (grad * (mask[..., None] * (g / count)),)


defop("softmax", _softmax_fwd, _softmax_bwd)
defop("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
defop("layer_norm", _layer_norm_fwd, _layer_norm_bwd)
defop("masked_fill", _masked_fill_fwd, _masked_fill_bwd)
defop("cross_entropy", _cross_entropy_fwd, _cross_entropy_bwd)


def softmax(x, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return apply("log_softmax", x, axis=axis)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    return apply("layer_norm", x, gain, bias, eps=eps)


def masked_fill(x, keep: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``keep`` is False by ``value`` (gradient 0 there)."""
    return apply("masked_fill", x, keep=np.asarray(keep, dtype=bool), value=value)


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token-level cross-entropy over unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
    return apply("cross_entropy", logits, targets=targets, mask=mask)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; callers skip it entirely at evaluation time."""
    if p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return mul(x, keep / (1.0 - p))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place. Missing grads count as zero."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {value.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, named_params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = named_params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
