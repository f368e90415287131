"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Graph` records every op applied to tensors that belong to it.
Tensors created outside a graph are constants: ops on constants only run
the numpy kernel and record nothing, which is how inference runs.

Every op accepts arbitrary leading batch dimensions where that makes sense
(``conv2d`` takes ``C x H x W`` or ``N x C x H x W``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

DEBUG = bool(os.environ.get("CATN_DEBUG"))

# op kinds whose analytic gradient is deliberately scaled (grad-check sensitivity hook)
CORRUPT_OPS: set[str] = set()


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    __slots__ = ("data", "node_id", "graph")

    def __init__(self, data, graph: "Graph | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Gradients(Mapping):
    """Gradient arrays keyed by node id; also indexable by the tensor itself."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def _key(self, key):
        return key.node_id if isinstance(key, Tensor) else key

    def __getitem__(self, key) -> np.ndarray:
        return self._grads[self._key(key)]

    def __contains__(self, key) -> bool:
        return self._key(key) in self._grads

    def __iter__(self):
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)


class Graph:
    """Append-only op tape. Parents of node k always have ids below k."""

    def __init__(self, track_kinks: bool = False):
        self.nodes: list[Node] = []
        self._leaves: dict[int, tuple[int, ...]] = {}
        self.track_kinks = track_kinks
        self.kinks: list[bytes] = []

    def leaf(self, data) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        arr = np.array(data, dtype=np.float64)
        self._leaves[node_id] = arr.shape
        return Tensor(arr, self, node_id)

    def leaves(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.leaf(arr) for name, arr in arrays.items()}

    def record(self, op: str, parents: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
        node_id = len(self.nodes)
        ids = tuple(-1 if p.graph is not self else p.node_id for p in parents)
        self.nodes.append(Node(op, ids, backward))
        return Tensor(out, self, node_id)

    def backward(self, loss: Tensor) -> Gradients:
        if loss.graph is not self or loss.node_id is None:
            raise ContractError("loss is not a node of this graph")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for k in range(loss.node_id, -1, -1):
            g = grads[k]
            node = self.nodes[k]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            if node.op in CORRUPT_OPS:
                parent_grads = [None if pg is None else pg * 1.5 for pg in parent_grads]
            for pid, pg in zip(node.parents, parent_grads):
                if pid < 0 or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
            if node.op != "leaf":
                grads[k] = None
        out = {}
        for lid, shape in self._leaves.items():
            g = grads[lid]
            out[lid] = np.zeros(shape) if g is None else g
        return Gradients(out)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_of(*tensors: Tensor) -> Graph | None:
    for t in tensors:
        if t.graph is not None:
            return t.graph
    return None


def _emit(op: str, parents: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    graph = _graph_of(*parents)
    if graph is None:
        return Tensor(out)
    return graph.record(op, parents, out, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data - b.data
    return _emit("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _emit(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def log(x, clamp: float = 0.0) -> Tensor:
    """Natural log of ``max(x, clamp)``; the clamped entries get zero gradient."""
    x = _as_tensor(x)
    xd = x.data
    safe = np.maximum(xd, clamp) if clamp > 0 else xd
    out = np.log(safe)

    def backward(g):
        gx = g / safe
        if clamp > 0:
            gx = np.where(xd >= clamp, gx, 0.0)
        return (gx,)

    return _emit("log", (x,), out, backward)


def activation(x, kind: str) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        graph = _graph_of(x)
        if graph is not None and graph.track_kinks:
            graph.kinks.append(np.packbits(mask).tobytes())
        out = np.where(mask, xd, 0.0)
        return _emit("relu", (x,), out, lambda g: (g * mask,))
    if kind == "sigmoid":
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        out[~pos] = ex / (1.0 + ex)
        return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))
    if kind == "tanh":
        out = np.tanh(xd)
        return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x) -> Tensor:
    return activation(x, "relu")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x) -> Tensor:
    return activation(x, "tanh")


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    ka = ad.shape[-1]
    kb = bd.shape[-2] if bd.ndim >= 2 else bd.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
    if ad.ndim == 2 and bd.ndim == 2:
        out = ad @ bd
        return _emit("matmul", (a, b), out, lambda g: (g @ bd.T, ad.T @ g))
    out = np.matmul(ad, bd)

    def backward(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", (a, b), out, backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _emit("transpose", (x,), out, lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    out = x.data[index]

    def backward(g):
        gx = np.zeros(src)
        if _is_fancy(index):
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return _emit("getitem", (x,), np.array(out), backward)


def _is_fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def take_rows(matrix, ids) -> Tensor:
    """Row lookup ``matrix[ids]``; backward accumulates into the looked-up rows only."""
    matrix = _as_tensor(matrix)
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = matrix.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"row id out of range [0, {n_rows})")
    src = matrix.shape
    out = matrix.data[ids]

    def backward(g):
        gm = np.zeros(src)
        np.add.at(gm, ids, g)
        return (gm,)

    return _emit("take_rows", (matrix,), out, backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero parts")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {[q.shape for q in parts]}")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=ax)

    def backward(g):
        return [
            g[(slice(None),) * ax + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(parts))
        ]

    return _emit("concat", parts, out, backward)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise ShapeError(f"stack shapes differ: {[q.shape for q in parts]}")
    ax = axis % (len(ref) + 1)
    out = np.stack([p.data for p in parts], axis=ax)

    def backward(g):
        return [np.take(g, i, axis=ax) for i in range(len(parts))]

    return _emit("stack", parts, out, backward)


def reduce(x, kind: str = "sum", axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    if kind == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=axis, keepdims=keepdims)
        count = x.data.size if axis is None else int(np.prod([src[a] for a in np.atleast_1d(axis)]))
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, src).copy(),)

    return _emit(kind, (x,), np.asarray(out), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, backward)


# ---------------------------------------------------------------- conv layers


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


def pad2d(x, bottom: int, right: int) -> Tensor:
    """Zero-pad the last two axes at the bottom/right edge."""
    x = _as_tensor(x)
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(0, bottom), (0, right)]
    out = np.pad(x.data, widths)
    return _emit("pad2d", (x,), out, lambda g: (g[..., :h, :w],))


def conv2d(x, kernels, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``[N x] C_in x H x W`` with ``C_out x C_in x kh x kw``."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    xd, squeeze = _batched(x.data, 4)
    wd = kernels.data
    n, c, h, w = xd.shape
    o, ck, kh, kw = wd.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {wd.shape}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp or (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d output size not integral: input {x.shape}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    # channel-major im2col: cols[(c, i, j), (n, y, x)], built from kh*kw slice copies
    xt = xd.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = wd.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]
    need_gx = x.graph is not None

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gmat @ cols.T).reshape(wd.shape)
        gx = None
        if need_gx:
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            if pad:
                gxp = gxp[:, :, pad : pad + h, pad : pad + w]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
            if squeeze:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _emit("conv2d", parents, out, backward)


def maxpool2d(x, k: int = 2, stride: int | None = None) -> Tensor:
    """Window maximum over the last two axes; ties go to the first row-major argmax."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    xd, squeeze = _batched(x.data, 4)
    n, c, h, w = xd.shape
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise ShapeError(f"maxpool2d window {k}/stride {stride} does not tile input {x.shape}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    graph = _graph_of(x)
    if graph is not None and graph.track_kinks:
        graph.kinks.append(arg.astype(np.int16).tobytes())
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros((n, c, h, w))
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g4 * hit
        return (gx[0] if squeeze else gx,)

    return _emit("maxpool2d", (x,), out, backward)


def batchnorm(x, gamma, beta, running: dict[str, np.ndarray], train: bool,
              momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all axes but axis 1 (``N x C [x H x W]``).

    In train mode the running mean/variance in ``running`` are updated in place.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm has {gamma.shape[0]} channels, input {xd.shape}")
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    if train:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running["mean"] *= momentum
        running["mean"] += (1.0 - momentum) * mean
        running["var"] *= momentum
        running["var"] += (1.0 - momentum) * var
    else:
        mean, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    m = xd.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd
        if train:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _emit("batchnorm", (x, gamma, beta), out, backward)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-rate)``; identity in eval."""
    x = _as_tensor(x)
    if not train or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return mul(x, mask)


def constants(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in arrays.items()}
