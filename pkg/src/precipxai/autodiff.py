"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations the forecasting network needs are provided.
Operations record onto the active :class:`Tape` when one is open and at least
one operand requires a gradient; outside a tape everything is plain numpy.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

MAX_RANK = 5


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}: shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)


@dataclass
class TapeNode:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


_active = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_active, "tape", None)


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Use as a context manager; nested tapes are not supported.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("a tape is already recording on this thread")
        _active.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _active.tape = None

    def reset(self) -> None:
        self.nodes.clear()

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tensor reachable from ``loss``.

        Gradients are recomputed from zero on every call.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        touched: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in (*node.parents, node.out):
                touched[id(t)] = t
        for t in touched.values():
            t.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
        for t in touched.values():
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape recorded the computation of this loss")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, **saved) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    tape = active_tape()
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(TapeNode(op, out, parents, backward_fn, saved))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if len(shape) > MAX_RANK:
        raise ShapeError(f"{op}: result rank exceeds {MAX_RANK}")
    return shape


# --- element-wise binary -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


# --- nonlinearities ------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# --- reductions and reshaping -------------------------------------------

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (x,), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _emit("mean", np.asarray(out, dtype=np.float64), (x,), back)


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over the two spatial axes of ``[..., H, W, C]``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects [..., H, W, C], got {x.shape}")
    return mean(x, axis=(x.ndim - 3, x.ndim - 2))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _emit("getitem", np.array(x.data[index]), (x,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=ax), ts, back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), back)


# --- convolution ---------------------------------------------------------

def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """[N,H,W,C] -> [N*H*W, k*k*C] zero-padded 'same' patches."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N,H,W,C,k,k
    n, h, w, c = x.shape
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def _correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    n, h, w, _ = x.shape
    k, _, cin, cout = kernel.shape
    return (_patches(x, k) @ kernel.reshape(k * k * cin, cout)).reshape(n, h, w, cout)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1, zero 'same'-padded cross-correlation.

    ``x`` is ``[H,W,Cin]`` or ``[N,H,W,Cin]``; ``kernel`` is ``[k,k,Cin,Cout]``
    with odd ``k``; ``bias`` is ``[Cout]`` or None.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d kernel must be [k,k,Cin,Cout], got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if x.ndim not in (3, 4) or x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match Cout={cout}")

    unbatched = x.ndim == 3
    xb = x.data[None] if unbatched else x.data
    n, h, w, _ = xb.shape
    cols = _patches(xb, k)
    out = (cols @ kernel.data.reshape(k * k * cin, cout)).reshape(n, h, w, cout)
    if bias is not None:
        out = out + bias.data
    if unbatched:
        out = out[0]

    def back(g):
        gb = g[None] if unbatched else g
        g2 = gb.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(k, k, cin, cout)
        gx = None
        if x.requires_grad:
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)
            gx = _correlate(gb, np.ascontiguousarray(flipped))
            if unbatched:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", out, parents, back)


# --- finite-difference oracle --------------------------------------------

def numeric_grad(f: Callable[[], float], param: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of scalar ``f`` wrt ``param[index]`` (mutated then restored)."""
    orig = param[index]
    param[index] = orig + h
    fp = f()
    param[index] = orig - h
    fm = f()
    param[index] = orig
    return (fp - fm) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
