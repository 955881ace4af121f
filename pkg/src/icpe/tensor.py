"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operations the detector needs are provided. Each op computes its
forward value with numpy and, when gradients are being recorded, attaches a
closure that maps the output gradient to one gradient per parent.

Broadcasting is deliberately restricted: elementwise binary ops accept equal
shapes, or an ``[H, W]`` mask against a ``[C, H, W]`` tensor.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording a graph (thread-local)."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # A few operators for readability in tests and small expressions.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf tensor holding a private float64 copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable t with requires_grad."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == 3 and b.ndim == 2 and a.shape[1:] == b.shape:
        return "mask_b"
    if a.ndim == 2 and b.ndim == 3 and b.shape[1:] == a.shape:
        return "mask_a"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "add")

    def bw(g):
        if kind == "same":
            return g, g
        if kind == "mask_b":
            return g, g.sum(axis=0)
        return g.sum(axis=0), g

    return _node(a.data + b.data, "add", (a, b), bw)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "hadamard")
    ad, bd = a.data, b.data

    def bw(g):
        ga, gb = g * bd, g * ad
        if kind == "mask_b":
            gb = gb.sum(axis=0)
        elif kind == "mask_a":
            ga = ga.sum(axis=0)
        return ga, gb

    return _node(ad * bd, "hadamard", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, "scale", (x,), lambda g: (g * c,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def divide(x: Tensor, s: Tensor) -> Tensor:
    """``x / s`` for a single-element tensor ``s``."""
    if s.size != 1:
        raise ShapeError(f"divide: denominator must have one element, got {s.shape}")
    sv = float(s.data.reshape(-1)[0])
    xd = x.data
    sshape = s.shape
    return _node(xd / sv, "divide", (x, s),
                 lambda g: (g / sv, np.full(sshape, -float((g * xd).sum()) / (sv * sv))))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _node(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), "relu", (x,), lambda g: (g * on,))


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Name-dispatched access to the pointwise ops."""
    table = {"add": add, "hadamard": hadamard, "scale": scale, "sigmoid": sigmoid, "relu": relu}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args, **kwargs)


# ---------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with add.at."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(np.array(x.data[idx]), "index", (x,), bw)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(ts)
    if not ts:
        raise ShapeError("stack of an empty sequence")
    first = ts[0].shape
    for t in ts[1:]:
        if t.shape != first:
            raise ShapeError(f"stack: shapes {first} and {t.shape} differ")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(np.stack([t.data for t in ts], axis=axis), "stack", ts, bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(ts)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _node(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.full(shape, float(g) / n),))


def weighted_sum(weights: Tensor, vectors: Tensor) -> Tensor:
    """``sum_i weights[i] * vectors[i]`` with correctly rounded summation.

    Each output channel is reduced with ``math.fsum`` so the result does not
    depend on the order of the summands.
    """
    w = weights.data.reshape(-1)
    if vectors.ndim != 2 or vectors.shape[0] != w.size:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs vectors {vectors.shape}")
    terms = w[:, None] * vectors.data
    out = np.array([math.fsum(col) for col in terms.T])
    wshape = weights.shape

    def bw(g):
        return (vectors.data @ g).reshape(wshape), np.outer(w, g)

    return _node(out, "weighted_sum", (weights, vectors), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` over the last axis of ``x`` (any leading axes)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return g @ wd, g2.T @ x2, g2.sum(axis=0)

    return _node(out, "linear", (x, weight, bias), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, "softmax", (x,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, k: int | None = None) -> Tensor:
    """Stride-1 convolution, zero same-padding for 3x3 kernels.

    ``x`` is ``[C_in, H, W]`` or a batch ``[N, C_in, H, W]``.
    """
    kk = weight.shape[-1]
    if k is not None and k != kk:
        raise ShapeError(f"conv2d: k={k} but weight has kernel {kk}")
    if kk not in (1, 3) or weight.ndim != 4 or weight.shape[2] != kk:
        raise ShapeError(f"conv2d: unsupported weight shape {weight.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {weight.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {cout} output channels")
    w2 = weight.data.reshape(cout, cin * kk * kk)

    xt = xd.transpose(1, 0, 2, 3)  # [C_in, N, H, W]
    if kk == 1:
        cols = xt.reshape(cin, n * h * w)
    else:
        xp = np.pad(xt, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((cin, 3, 3, n, h, w))
        for i in range(3):
            for j in range(3):
                cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
        cols = cols.reshape(cin * 9, n * h * w)
    out = (w2 @ cols).reshape(cout, n, h, w).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    if not batched:
        out = out[0]
    need_x = x.requires_grad

    def bw(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g4.sum(axis=(0, 2, 3))
        if not need_x:
            return None, gw, gb
        dcols = w2.T @ g2
        if kk == 1:
            gxt = dcols.reshape(cin, n, h, w)
        else:
            dcols = dcols.reshape(cin, 3, 3, n, h, w)
            gxp = np.zeros((cin, n, h + 2, w + 2))
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
            gxt = gxp[:, :, 1:-1, 1:-1]
        gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        return (gx if batched else gx[0]), gw, gb

    return _node(out, "conv2d", (x, weight, bias), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: odd spatial size {(h, w)}")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _node(out, "avg_pool2", (x,), bw)


def gap(x: Tensor) -> Tensor:
    """Global average pooling ``[C, H, W] -> [C]``."""
    if x.ndim != 3:
        raise ShapeError(f"gap expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    return _node(x.data.mean(axis=(1, 2)), "gap", (x,),
                 lambda g: (np.broadcast_to((g / (h * w))[:, None, None], (c, h, w)).copy(),))


def gmp(x: Tensor) -> Tensor:
    """Global max pooling ``[C, H, W] -> [C]``; ties route gradient to the first max."""
    if x.ndim != 3:
        raise ShapeError(f"gmp expects [C,H,W], got {x.shape}")
    c = x.shape[0]
    flat = x.data.reshape(c, -1)
    arg = flat.argmax(axis=1)

    def bw(g):
        out = np.zeros_like(flat)
        out[np.arange(c), arg] = g
        return (out.reshape(x.shape),)

    return _node(flat[np.arange(c), arg], "gmp", (x,), bw)


def roi_pool(x: Tensor, windows: Sequence[tuple[int, int, int, int]]) -> Tensor:
    """Mean over each feature window ``(y0, y1, x0, x1)`` (half-open): ``[C,h,w] -> [R, C]``."""
    xd = x.data
    out = np.stack([xd[:, y0:y1, x0:x1].mean(axis=(1, 2)) for y0, y1, x0, x1 in windows])

    def bw(g):
        gx = np.zeros_like(xd)
        for r, (y0, y1, x0, x1) in enumerate(windows):
            gx[:, y0:y1, x0:x1] += (g[r] / ((y1 - y0) * (x1 - x0)))[:, None, None]
        return (gx,)

    return _node(out, "roi_pool", (x,), bw)


def modulate(rois: Tensor, gates: Tensor) -> Tensor:
    """Outer channel-wise product: ``[R, C]`` x ``[M, C]`` -> ``[R, M, C]``."""
    if rois.ndim != 2 or gates.ndim != 2 or rois.shape[1] != gates.shape[1]:
        raise ShapeError(f"modulate: rois {rois.shape} vs gates {gates.shape}")
    rd, gd = rois.data, gates.data

    def bw(g):
        return np.einsum("rmc,mc->rc", g, gd), np.einsum("rmc,rc->mc", g, rd)

    return _node(rd[:, None, :] * gd[None, :, :], "modulate", (rois, gates), bw)


def cosine_map(v: Tensor, x: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity between ``v`` ``[C]`` and every pixel of ``x`` ``[C, H, W]``."""
    if v.ndim != 1 or x.ndim != 3 or x.shape[0] != v.shape[0]:
        raise ShapeError(f"cosine_map: v {v.shape} vs x {x.shape}")
    vd, xd = v.data, x.data
    dot = np.tensordot(vd, xd, axes=(0, 0))
    vv = float(vd @ vd)
    xx = (xd * xd).sum(axis=0)
    vn = math.sqrt(vv)
    xn = np.sqrt(xx)
    nv = max(vn, eps)
    nx = np.maximum(xn, eps)
    # sqrt of the product keeps self-similarity exactly 1
    denom = np.where((xn > eps) & (vn > eps), np.sqrt(vv * xx), nv * nx)
    out = dot / denom

    def bw(g):
        a = g / (nv * nx)
        gv = np.tensordot(xd, a, axes=((1, 2), (0, 1)))
        if vn > eps:
            gv = gv - vd * float((a * dot).sum()) / (nv * nv)
        gx = vd[:, None, None] * a
        live = xn > eps
        gx = gx - np.where(live, a * dot / (nx * nx), 0.0)[None] * xd
        return gv, gx

    return _node(out, "cosine_map", (v, x), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax of ``logits``."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"cross_entropy expects [N, M] logits, got {logits.shape}")
    n, m = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {lab.size} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= m):
        raise ValueError(f"cross_entropy: labels must lie in [0, {m})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(s) - z[rows, lab]))
    p = e / s[:, None]

    def bw(g):
        d = p.copy()
        d[rows, lab] -= 1.0
        return (d * (float(g) / n),)

    return _node(np.asarray(loss), "cross_entropy", (logits,), bw)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero residual is 0."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"l1_loss: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _node(np.asarray(np.abs(diff).mean()), "l1_loss", (pred,),
                 lambda g: (np.sign(diff) * (float(g) / n),))


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamRegistry:
    """Insertion-ordered, uniquely named trainable tensors plus SGD state."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._entries):
            missing = set(self._entries) - set(state)
            extra = set(state) - set(self._entries)
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            if name not in self._entries:
                continue
            t = self._entries[name]
            if t.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs parameter {t.shape}")
            t.data = np.array(arr, dtype=np.float64)
        self.velocity.clear()


def sgd_step(params: ParamRegistry, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Momentum SGD with L2 decay folded into the gradient, then zero grads.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    for name, t in params:
        step = weight_decay * t.data
        if t.grad is not None:
            step = t.grad + step
        v = params.velocity.get(name)
        v = step if v is None else momentum * v + step
        params.velocity[name] = v
        t.data = t.data - lr * v
        t.grad = None


def uniform_init(rng, shape: Iterable[int], bound: float) -> np.ndarray:
    return rng.uniform_array(tuple(shape), -bound, bound)
