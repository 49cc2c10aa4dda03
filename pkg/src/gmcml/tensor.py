"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` linearises that graph into a :class:`ComputationTape`,
replays it in reverse, writes ``.grad`` on the leaves and then dismantles the
graph, so each recorded tape can be consumed exactly once.

Binary operations require identical shapes; the only broadcasting allowed is
a 0-d (scalar) operand against a tensor.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ComputationTape",
    "TapeError",
    "tensor",
    "no_grad",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "tanh",
    "ln",
    "exp",
    "relu",
    "sigmoid",
    "maximum",
    "clamp",
    "matmul",
    "linear",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "upsample2x",
    "reshape",
    "concat",
    "take",
    "tsum",
    "tmean",
    "backward",
    "finite_diff_check",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeError(RuntimeError):
    """Raised when a tape is replayed twice or a loss is unusable."""


class Tensor:
    """A float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves whose gradient :func:`backward` should
    populate. Outputs of primitives are recorded only when at least one
    input requires a gradient and recording is enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
        """Wrap the result of a primitive and record it if any parent needs a gradient.

        ``backward_fn`` receives the output gradient and returns one gradient
        (or ``None``) per parent, each shaped like that parent.
        """
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out._consumed = False
        out.name = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_UNARY = {"neg", "square", "tanh", "ln", "exp", "relu", "sigmoid"}
_BINARY = {"add", "sub", "mul", "div", "max"}


def _check_binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-with-tensor broadcasting exists
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Apply a named elementwise primitive.

    Unary kinds: neg, square, tanh, ln, exp, relu, sigmoid.
    Binary kinds: add, sub, mul, div, max.
    """
    a = _as_tensor(a)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _unary(op_kind, a)
    if op_kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if b is None:
        raise ValueError(f"{op_kind} needs two operands")
    b = _as_tensor(b)
    _check_binary_shapes(a, b)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if op_kind == "add":
        out = x + y
        fn = lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
    elif op_kind == "sub":
        out = x - y
        fn = lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))
    elif op_kind == "mul":
        out = x * y
        fn = lambda g: (_reduce_to(g * y, sa), _reduce_to(g * x, sb))
    elif op_kind == "div":
        if np.any(y == 0):
            raise ValueError("division by zero")
        out = x / y
        fn = lambda g: (_reduce_to(g / y, sa), _reduce_to(-g * x / (y * y), sb))
    else:  # max; ties send the gradient to the first operand
        first = x >= y
        out = np.where(first, x, y)
        fn = lambda g: (_reduce_to(g * first, sa), _reduce_to(g * ~first, sb))
    return Tensor.from_op(out, (a, b), fn)


def _unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "neg":
        return Tensor.from_op(-x, (a,), lambda g: (-g,))
    if kind == "square":
        return Tensor.from_op(x * x, (a,), lambda g: (2.0 * x * g,))
    if kind == "tanh":
        t = np.tanh(x)
        return Tensor.from_op(t, (a,), lambda g: (g * (1.0 - t * t),))
    if kind == "ln":
        if np.any(x <= 0):
            raise ValueError("ln of non-positive value")
        return Tensor.from_op(np.log(x), (a,), lambda g: (g / x,))
    if kind == "exp":
        e = np.exp(x)
        return Tensor.from_op(e, (a,), lambda g: (g * e,))
    if kind == "relu":
        live = x > 0
        return Tensor.from_op(np.where(live, x, 0.0), (a,), lambda g: (g * live,))
    # sigmoid, split by sign for overflow safety
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def maximum(a, b) -> Tensor:
    return elementwise("max", a, b)


def neg(a) -> Tensor:
    return elementwise("neg", a)


def square(a) -> Tensor:
    return elementwise("square", a)


def tanh(a) -> Tensor:
    return elementwise("tanh", a)


def ln(a) -> Tensor:
    return elementwise("ln", a)


def exp(a) -> Tensor:
    return elementwise("exp", a)


def relu(a) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a) -> Tensor:
    return elementwise("sigmoid", a)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient passes only strictly inside the range."""
    a = _as_tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    return Tensor.from_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    return Tensor.from_op(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for a batch ``x`` of shape (N, in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} x {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return Tensor.from_op(out, (x, weight), lambda g: (g @ wd.T, xd.T @ g))
    bias = _as_tensor(bias)
    if bias.shape != (wd.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match output width {wd.shape[1]}")
    out = out + bias.data
    return Tensor.from_op(out, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(f"non-integral output extent: ({n}+2*{pad}-{k})/{stride}+1")
    return span // stride + 1


def conv2d(x, kernels, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, kh, kw) with kh, kw in {1, 3}. Output keeps the batching of
    the input.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W) input and 4-D kernels, got {x.shape}, {kernels.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernels expect {ci}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"kernel size {kh}x{kw} unsupported (1 or 3 only)")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    ho = _out_extent(h, kh, stride, pad)
    wo = _out_extent(w, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    npix = ho * wo
    kdim = c * kh * kw
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(n, c, npix)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # per sample: (C*kh*kw, Ho*Wo) receptive-field columns
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, kdim, npix)
    wmat = kernels.data.reshape(co, kdim)
    out = np.matmul(wmat, cols).reshape(n, co, ho, wo)
    parents = [x, kernels]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (co,):
            raise ValueError(f"bias shape {bias.shape} does not match {co} output channels")
        out += bias.data[None, :, None, None]
        parents.append(bias)
    if unbatched:
        out = out[0]

    def fn(g):
        g3 = (g[None] if unbatched else g).reshape(n, co, npix)
        gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(co, c, kh, kw)
        gcols = np.matmul(wmat.T, g3)
        if kh == kw == 1 and stride == 1:
            gxp = gcols.reshape(n, c, ho, wo)
        else:
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if unbatched:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    return Tensor.from_op(out, parents, fn)


def _pool_view(xd: np.ndarray) -> np.ndarray:
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 pooling needs even spatial extents, got {h}x{w}")
    return xd.reshape(n, c, h // 2, 2, w // 2, 2)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2 on (N, C, H, W)."""
    x = _as_tensor(x)
    _pool_view(x.data)
    xd = x.data
    quads = [xd[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # the first maximal element of each window takes the gradient
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)

    def fn(g):
        gx = np.empty_like(xd)
        for (i, j), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            gx[:, :, i::2, j::2] = g * m
        return (gx,)

    return Tensor.from_op(out, (x,), fn)


def avg_pool2d(x) -> Tensor:
    """2x2 average pooling with stride 2 on (N, C, H, W)."""
    x = _as_tensor(x)
    out = _pool_view(x.data).mean(axis=(3, 5))

    def fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor.from_op(out, (x,), fn)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of (N, C, H, W)."""
    x = _as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# structural ops and reductions
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))]

    return Tensor.from_op(out, ts, fn)


def take(x, index) -> Tensor:
    """NumPy-style indexing; repeated indices accumulate in the gradient."""
    x = _as_tensor(x)
    out = x.data[index]

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor.from_op(np.array(out, dtype=np.float64), (x,), fn)


def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)
    shape = x.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(out, (x,), fn)


def tmean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / float(count))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class ComputationTape:
    """Topologically ordered record of the primitives that produced ``root``."""

    def __init__(self, root: Tensor):
        if root._consumed:
            raise TapeError("tape already consumed; re-run the forward pass before calling backward again")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.root = root
        self.nodes = order  # parents always precede children

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterable[Tensor]:
        return iter(self.nodes)

    def replay(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.clear()

    def clear(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self.root._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` slots; the recorded graph is
    released afterwards, so a second call on the same loss raises
    :class:`TapeError`.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed; re-run the forward pass before calling backward again")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires a gradient")
    ComputationTape(loss).replay()


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    at,
    step: float = 1e-5,
    coords: int | Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between the autodiff and central-difference gradients.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``coords`` restricts the comparison to a random subset (an int) or to the
    given flat indices; by default every coordinate is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(_as_tensor(at).data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise ValueError(f"fn must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise ValueError("fn returned a non-finite value")
    if out.requires_grad:
        backward(out)
    analytic = np.zeros(base.size) if x.grad is None else x.grad.reshape(-1)

    if coords is None:
        idx = np.arange(base.size)
    elif isinstance(coords, (int, np.integer)):
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = rng.choice(base.size, size=min(int(coords), base.size), replace=False)
    else:
        idx = np.asarray(coords, dtype=int)

    worst = 0.0
    flat = base.reshape(-1)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(Tensor(base)).item()
            flat[i] = orig - step
            fm = fn(Tensor(base)).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("fn returned a non-finite value")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
