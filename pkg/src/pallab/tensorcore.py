"""Small dense-array layer with a reverse-mode gradient tape.

Only the handful of operations the PAL pipeline needs are provided. Arrays are
float64 numpy arrays; a :class:`Tensor` wraps one and, while a :class:`Tape` is
active, every operation on a tensor that requires a gradient is recorded so
that :meth:`Tape.backward` can replay the records in reverse.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    pass


class DegenerateNormError(ValueError):
    """Raised when a vector to be normalized has (near) zero length."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever is left belongs to leaves
        for node in self.nodes:
            for inp in node.inputs:
                g = grads.pop(id(inp), None)
                if g is not None:
                    inp.grad = g if inp.grad is None else inp.grad + g


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.nodes.append(_Node(inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- operations


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` may be 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _record(A @ B, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible downstream instead of zeroing it
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the second-to-last axis."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        return (full,)

    return _record(x.data[..., start:stop, :].copy(), (x,), backward)


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g.item()),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _record(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g.item() / n),))


def l2_normalize(v, eps: float = NORM_EPS) -> Tensor:
    """Unit-normalize along the last axis (so row-wise for matrices)."""
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateNormError(f"cannot normalize vector with norm <= {eps}")
    u = v.data / norm

    def backward(g):
        return ((g - u * np.sum(g * u, axis=-1, keepdims=True)) / norm,)

    return _record(u, (v,), backward)


def temporal_avg_pool(seq) -> Tensor:
    """Arithmetic mean over the temporal (second-to-last) axis."""
    seq = as_tensor(seq)
    if seq.data.ndim < 2 or seq.shape[-2] < 1:
        raise ShapeError(f"pooling needs at least one time step, got {seq.shape}")
    shape, n = seq.shape, seq.shape[-2]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / n, shape).copy(),)

    return _record(seq.data.mean(axis=-2), (seq,), backward)


def weighted_pool(seq, weights: np.ndarray) -> Tensor:
    """Per-sequence weighted sum over time: ``out[b] = weights[b] @ seq[b]``.

    ``weights`` is a constant [B, J] array; with rows of ``1/n`` over a window
    this is an aligned average pool done for a whole batch at once.
    """
    seq = as_tensor(seq)
    w = np.asarray(weights, dtype=np.float64)
    if seq.data.ndim != 3 or w.shape != seq.shape[:2]:
        raise ShapeError(f"weighted_pool shape mismatch: {w.shape} vs {seq.shape}")
    out = np.einsum("bj,bjd->bd", w, seq.data)
    return _record(out, (seq,), lambda g: (w[:, :, None] * g[:, None, :],))


def temporal_conv1d(seq, kernel, bias) -> Tensor:
    """Width-3 convolution over the clip axis with one step of zero padding.

    ``seq`` is [J, D_in] or [B, J, D_in]; ``kernel`` is [3, D_in, D_out] with
    tap 0 looking one step back and tap 2 one step ahead.
    """
    seq, kernel, bias = as_tensor(seq), as_tensor(kernel), as_tensor(bias)
    x, w, b = seq.data, kernel.data, bias.data
    if x.ndim not in (2, 3):
        raise ShapeError(f"temporal_conv1d expects [J, D] or [B, J, D], got {x.shape}")
    J = x.shape[-2]
    if J < 1:
        raise ShapeError("temporal_conv1d needs J >= 1")
    if w.ndim != 3 or w.shape[0] != 3 or w.shape[1] != x.shape[-1] or b.shape != (w.shape[2],):
        raise ShapeError(
            f"temporal_conv1d shapes: seq {x.shape}, kernel {w.shape}, bias {b.shape}"
        )
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (0, 0)]
    xp = np.pad(x, pad)
    out = xp[..., 0:J, :] @ w[0] + xp[..., 1 : J + 1, :] @ w[1] + xp[..., 2 : J + 2, :] @ w[2] + b

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for k in range(3):
            gxp[..., k : k + J, :] += g @ w[k].T
            window = xp[..., k : k + J, :]
            gw[k] = np.tensordot(window, g, axes=(list(range(g.ndim - 1)), list(range(g.ndim - 1))))
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gxp[..., 1 : J + 1, :], gw, gb

    return _record(out, (seq, kernel, bias), backward)


def info_nce(q, k_pos, negatives: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE loss of queries against one positive each and shared negatives.

    ``q`` and ``k_pos`` are [D] or [B, D]; ``negatives`` is a constant [K, D]
    array (K may be 0). Logits are max-shifted before exponentiation.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q, k_pos = as_tensor(q), as_tensor(k_pos)
    single = q.data.ndim == 1
    Q = q.data[None] if single else q.data
    Kp = k_pos.data[None] if single else k_pos.data
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1, Q.shape[-1])
    if Kp.shape != Q.shape:
        raise ShapeError(f"query {q.shape} and positive key {k_pos.shape} differ")
    B = Q.shape[0]
    logits = np.concatenate([np.sum(Q * Kp, axis=1, keepdims=True), Q @ neg.T], axis=1) / tau
    top = logits.argmax(axis=1)
    rows = np.arange(B)
    shift = logits[rows, top][:, None]
    ex = np.exp(logits - shift)
    z = ex.sum(axis=1, keepdims=True)
    # log1p of the non-max terms keeps a near-zero loss accurate
    rest = ex.copy()
    rest[rows, top] = 0.0
    per = (shift[:, 0] - logits[:, 0]) + np.log1p(rest.sum(axis=1))
    p = ex / z

    def backward(g):
        c = g.item() / B
        dlog = p.copy()
        dlog[:, 0] -= 1.0
        dq = (dlog[:, :1] * Kp + dlog[:, 1:] @ neg) * (c / tau)
        dk = dlog[:, :1] * Q * (c / tau)
        if single:
            dq, dk = dq[0], dk[0]
        return dq, dk

    return _record(np.array(per.mean()), (q, k_pos), backward)


# ------------------------------------------------------------ gradient check


def gradcheck(f: Callable[..., Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` is called with them and
    must return a scalar Tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in xs]
    with Tape() as tape:
        out = f(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("function value is not finite")
    tape.backward(out)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        ana = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*leaves).data)
            flat[i] = orig - h
            fm = float(f(*leaves).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("function value is not finite near x")
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(ana[i] - numeric) / max(1.0, abs(numeric)))
    return worst
