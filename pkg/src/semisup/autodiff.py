"""Reverse-mode automatic differentiation over dense numpy tensors.

A Graph is an explicit tape: operations record themselves when any input is
attached to a live graph, and backward() replays the tape in reverse,
accumulating gradients in per-node buffers owned by the graph.  Tensors not
attached to any graph behave as constants, so inference-style forward passes
record nothing.

Conventions fixed here so tests are unambiguous:
  - broadcasting follows numpy's trailing-dimension alignment, nothing more;
  - conv2d is cross-correlation (no kernel flip);
  - max reductions route the gradient to the first maximal element per group.
"""

from __future__ import annotations

import numpy as np


class GraphError(RuntimeError):
    """Raised for tape misuse: consumed graphs, mixed graphs, non-scalar roots."""


class Tensor:
    """Dense float array, optionally linked into a differentiation graph."""

    __slots__ = ("data", "graph", "node_id", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.graph = None
        self.node_id = None
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detached(self):
        """Copy of the values with no graph link."""
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = "" if self.graph is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class Graph:
    """Execution tape.  One forward/backward pass per instance."""

    def __init__(self):
        self._tensors: list[Tensor] = []
        self._nodes: list = []  # per tensor: None for leaves, (parent_ids, backward_fn) otherwise
        self._watched: list[Tensor] = []
        self._consumed = False

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf whose gradient should be reported by backward()."""
        if self._consumed:
            raise GraphError("cannot watch on a consumed graph")
        if t.graph is self:
            return t
        if t.graph is not None:
            raise GraphError("tensor is already attached to another live graph")
        self._attach(t)
        self._watched.append(t)
        return t

    def _attach(self, t: Tensor):
        t.graph = self
        t.node_id = len(self._tensors)
        self._tensors.append(t)
        self._nodes.append(None)

    def _record(self, out: Tensor, parent_ids, backward_fn):
        self._attach(out)
        self._nodes[out.node_id] = (parent_ids, backward_fn)

    def backward(self, loss: Tensor) -> dict:
        """Accumulate d(loss)/d(leaf) for every watched leaf reachable from loss.

        Returns a map {watched tensor: gradient array}; unreachable leaves are
        absent (their .grad is set to None).  The graph is consumed: all its
        tensors are detached and a second backward raises.
        """
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward")
        if loss.graph is not self:
            raise GraphError("loss tensor is not on this graph (stale or foreign)")
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")

        grads: list = [None] * len(self._tensors)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            entry = self._nodes[nid]
            gout = grads[nid]
            if entry is None or gout is None:
                continue
            parent_ids, fn = entry
            for pid, pg in zip(parent_ids, fn(gout)):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg

        result = {}
        for t in self._watched:
            g = grads[t.node_id]
            t.grad = g
            if g is not None:
                result[t] = g
        for t in self._tensors:
            t.graph = None
            t.node_id = None
        self._consumed = True
        return result


def _coerce(x, ref_dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x) and ref_dtype is not None:
        return Tensor(np.asarray(x, dtype=ref_dtype))
    return Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.node_id is not None


def _live_graph(*parents):
    g = None
    for p in parents:
        if isinstance(p, Tensor) and p.graph is not None:
            if p.graph._consumed:
                raise GraphError("input tensor belongs to a stale (consumed) graph")
            if g is None:
                g = p.graph
            elif g is not p.graph:
                raise GraphError("inputs belong to two different live graphs")
    return g


def _make(out_data, parents, backward_fn) -> Tensor:
    g = _live_graph(*parents)
    out = Tensor(out_data)
    if g is not None:
        pids = tuple(
            p.node_id if isinstance(p, Tensor) and p.graph is g else None for p in parents
        )
        g._record(out, pids, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape` (trailing alignment)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(sa, sb):
    for a, b in zip(reversed(sa), reversed(sb)):
        if a != b and a != 1 and b != 1:
            raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _coerce(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    def fn(g):
        return (_unbroadcast(g, a.data.shape) if _tracked(a) else None,
                _unbroadcast(g, b.data.shape) if _tracked(b) else None)
    return _make(a.data + b.data, (a, b), fn)


def sub(a, b):
    a = _coerce(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    def fn(g):
        return (_unbroadcast(g, a.data.shape) if _tracked(a) else None,
                _unbroadcast(-g, b.data.shape) if _tracked(b) else None)
    return _make(a.data - b.data, (a, b), fn)


def mul(a, b):
    a = _coerce(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    def fn(g):
        return (_unbroadcast(g * b.data, a.data.shape) if _tracked(a) else None,
                _unbroadcast(g * a.data, b.data.shape) if _tracked(b) else None)
    return _make(a.data * b.data, (a, b), fn)


def div(a, b):
    a = _coerce(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    def fn(g):
        return (_unbroadcast(g / b.data, a.data.shape) if _tracked(a) else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if _tracked(b) else None)
    return _make(a.data / b.data, (a, b), fn)


def neg(a):
    a = _coerce(a)
    def fn(g):
        return ((-g) if _tracked(a) else None,)
    return _make(-a.data, (a,), fn)


def scale(a, c: float):
    """Multiply by a python scalar without promoting the dtype."""
    a = _coerce(a)
    c = float(c)
    def fn(g):
        return ((g * c) if _tracked(a) else None,)
    return _make(a.data * c, (a,), fn)


def exp(a):
    a = _coerce(a)
    out_data = np.exp(a.data)
    def fn(g):
        return ((g * out_data) if _tracked(a) else None,)
    return _make(out_data, (a,), fn)


def log(a):
    a = _coerce(a)
    def fn(g):
        return ((g / a.data) if _tracked(a) else None,)
    return _make(np.log(a.data), (a,), fn)


def sqrt(a):
    a = _coerce(a)
    out_data = np.sqrt(a.data)
    def fn(g):
        return ((g * (0.5 / out_data)) if _tracked(a) else None,)
    return _make(out_data, (a,), fn)


def relu(a):
    a = _coerce(a)
    def fn(g):
        return ((g * (a.data > 0)) if _tracked(a) else None,)
    return _make(np.maximum(a.data, 0), (a,), fn)


def softplus(a):
    """ln(1 + e^x), computed stably as max(x, 0) + log1p(e^{-|x|})."""
    a = _coerce(a)
    out_data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    def fn(g):
        # d softplus = sigmoid(x), stable in both tails
        sig = np.empty_like(a.data)
        pos = a.data >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return ((g * sig) if _tracked(a) else None,)
    return _make(out_data, (a,), fn)


# --------------------------------------------------------------- linear maps

def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    def fn(g):
        return ((g @ b.data.T) if _tracked(a) else None,
                (a.data.T @ g) if _tracked(b) else None)
    return _make(a.data @ b.data, (a, b), fn)


def transpose(a, axes=None):
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    def fn(g):
        return (np.ascontiguousarray(g.transpose(inv)) if _tracked(a) else None,)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), fn)


def reshape(a, shape):
    a = _coerce(a)
    def fn(g):
        return (g.reshape(a.data.shape) if _tracked(a) else None,)
    return _make(a.data.reshape(shape), (a,), fn)


def gather_rows(a, idx):
    """Select rows of a 2-D tensor; repeated indices accumulate gradient."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ValueError("gather_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    def fn(g):
        if not _tracked(a):
            return (None,)
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)
    return _make(a.data[idx], (a,), fn)


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axes)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
    if len(set(axes)) != len(axes):
        raise ValueError("duplicate axes")
    return axes


def tsum(a, axes=None, keepdims=False):
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    def fn(g):
        if not _tracked(a):
            return (None,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), fn)


def tmean(a, axes=None, keepdims=False):
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    inv = 1.0 / count
    def fn(g):
        if not _tracked(a):
            return (None,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, a.data.shape).copy(),)
    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), fn)


def tmax(a, axes=None, keepdims=False):
    """Max reduction; gradient flows to the first maximal element per group."""
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    red = 1
    for ax in axes:
        red *= a.shape[ax]
    flat = a.data.transpose(perm).reshape(-1, red)
    arg = flat.argmax(axis=1)  # first occurrence
    out_data = a.data.max(axis=axes, keepdims=keepdims)
    def fn(g):
        if not _tracked(a):
            return (None,)
        gz = np.zeros_like(flat)
        gz[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        shaped = gz.reshape(tuple(a.shape[i] for i in perm)).transpose(np.argsort(perm))
        return (np.ascontiguousarray(shaped),)
    return _make(out_data, (a,), fn)


def global_avg_pool(a):
    """N,C,H,W -> N,C spatial mean; the pre-logits pooling."""
    a = _coerce(a)
    if a.ndim != 4:
        raise ValueError("global_avg_pool expects an N,C,H,W tensor")
    return tmean(a, axes=(2, 3))


# --------------------------------------------------------------- log softmax

def log_softmax(a):
    """Row-wise log-probabilities, max-subtracted for stability."""
    a = _coerce(a)
    if a.ndim != 2 or a.shape[1] < 2:
        raise ValueError("log_softmax expects an N,K tensor with K >= 2")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    def fn(g):
        if not _tracked(a):
            return (None,)
        soft = np.exp(out_data)
        return (g - soft * g.sum(axis=1, keepdims=True),)
    return _make(out_data, (a,), fn)


# ------------------------------------------------------------------- conv2d

def _conv_out_extent(extent, k, stride, padding):
    return (extent + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding, out_h, out_w):
    """Patch matrix of shape (N*out_h*out_w, C*kh*kw), built in one copy."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # n, c, oh, ow, kh, kw (a view)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * out_h * out_w, c * kh * kw)


def _col2im(cols, x_shape, kh, kw, stride, padding, out_h, out_w):
    """Scatter-add patch gradients (N*oh*ow, C*kh*kw) back onto the input."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    six = np.ascontiguousarray(
        cols.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += six[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of N,C,H,W input with F,C,kh,kw kernels."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects N,C,H,W input and F,C,kh,kw kernel")
    n, c, h, wdt = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise ValueError(f"kernel channels {ck} do not match input channels {c}")
    out_h = _conv_out_extent(h, kh, stride, padding)
    out_w = _conv_out_extent(wdt, kw, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ValueError("non-positive output extent")

    cols = _im2col(x.data, kh, kw, stride, padding, out_h, out_w)  # (n*oh*ow, ckk)
    wflat = w.data.reshape(f, c * kh * kw)
    out2d = cols @ wflat.T  # (n*oh*ow, f): one large GEMM
    out_data = np.ascontiguousarray(
        out2d.reshape(n, out_h, out_w, f).transpose(0, 3, 1, 2))

    def fn(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        gx = gw = None
        if _tracked(w):
            gw = (cols.T @ g2d).T.reshape(w.data.shape)
        if _tracked(x):
            gcols = g2d @ wflat
            gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding, out_h, out_w)
        return (gx, gw)

    return _make(out_data, (x, w), fn)


# ---------------------------------------------------------------- grad check

def grad_check(f, params, h=1e-5):
    """Compare analytic gradients of scalar f(*params) with central differences.

    Returns the max over all parameter elements of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    f must be deterministic; two forward passes that disagree raise.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    v1 = f(*params).data.copy()
    v2 = f(*params).data.copy()
    if not np.array_equal(v1, v2):
        raise RuntimeError("f is not deterministic: two forward passes disagree")

    g = Graph()
    for p in params:
        g.watch(p)
    loss = f(*params)
    gradmap = g.backward(loss)

    worst = 0.0
    for p in params:
        analytic = gradmap.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(*params).data)
            flat[i] = orig - h
            dn = float(f(*params).data)
            flat[i] = orig
            numeric = (up - dn) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
