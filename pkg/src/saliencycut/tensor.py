"""Dense float64 tensors on an append-only reverse-mode differentiation tape.

Each forward pass owns a fresh :class:`Graph`. Ops record a vector-Jacobian
product when they run; :func:`backward` replays the tape once, in reverse
append order. Tensors are never mutated in place once attached to a graph,
and every op output is screened for NaN/Inf.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, GraphError, NumericsError

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "relu",
    "abs_",
    "max_with_scalar",
    "mean",
    "tensor_sum",
    "matmul",
    "add_bias",
    "conv2d",
    "avg_pool2d",
    "flatten",
    "reshape",
    "crop_batch",
    "topk_mean",
]


def _require_finite(arr, op):
    # NaN/Inf propagate through the sum; only pay for the full scan on suspicion
    total = arr.sum() if arr.size else 0.0
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in output of '{op}'")


_ALLOCATOR_TUNED = False


def _tune_allocator():
    """Keep large temporaries heap-backed instead of mmap-churned.

    Training allocates ~100MB of short-lived im2col buffers per step; glibc
    would return them to the kernel on free and page-fault them back in on
    the next step, which dominates the runtime. Raising the mmap/trim
    thresholds once makes those buffers reusable. Best effort: silently
    skipped off glibc.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


class _Node:
    __slots__ = ("op", "input_ids", "vjp", "need", "requires_grad", "shape")

    def __init__(self, op, input_ids, vjp, need, requires_grad, shape):
        self.op = op
        self.input_ids = input_ids
        self.vjp = vjp
        self.need = need
        self.requires_grad = requires_grad
        self.shape = shape


class Tensor:
    """Dense float64 array, optionally attached to a graph node."""

    __slots__ = ("data", "graph", "node_id", "requires_grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        _require_finite(arr, "tensor")
        self.data = arr
        self.graph = None
        self.node_id = None
        self.requires_grad = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = "" if self.graph is None else f" node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"

    # Operator sugar; scalars and constant arrays are allowed operands.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or np.ndim(other) != 0:
            raise DimensionError("tensor division only supports scalar divisors")
        return mul(self, 1.0 / float(other))


class Graph:
    """Append-only op tape; acyclic because inputs always precede outputs."""

    def __init__(self):
        _tune_allocator()
        self.nodes = []

    def leaf(self, data, requires_grad=False):
        """Attach `data` as a leaf tensor (a parameter or an input)."""
        t = Tensor(data)
        t.graph = self
        t.requires_grad = bool(requires_grad)
        t.node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, (), t.requires_grad, t.data.shape))
        return t

    def __len__(self):
        return len(self.nodes)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, out_data, parents, vjp):
    """Wrap `out_data`; register a tape node when any parent lives on a graph."""
    out = Tensor(out_data)
    graph = None
    for p in parents:
        if p.graph is not None:
            if graph is None:
                graph = p.graph
            elif graph is not p.graph:
                raise GraphError(f"'{op}' operands belong to different graphs")
    if graph is None:
        return out
    out.graph = graph
    need = tuple(p.requires_grad for p in parents)
    out.requires_grad = any(need)
    input_ids = tuple(p.node_id for p in parents)
    out.node_id = len(graph.nodes)
    graph.nodes.append(
        _Node(
            op,
            input_ids,
            vjp if out.requires_grad else None,
            need,
            out.requires_grad,
            out.data.shape,
        )
    )
    return out


def backward(loss):
    """Gradients of a scalar `loss` for every requires-grad leaf of its graph.

    Returns a dict mapping leaf node ids to gradient Tensors; leaves the loss
    does not depend on map to zeros. The tape is visited exactly once, in
    reverse append order, so repeated calls are bit-identical.
    """
    if not isinstance(loss, Tensor) or loss.graph is None:
        raise GraphError("backward requires a tensor attached to a graph")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    graph = loss.graph
    grads = {loss.node_id: np.ones_like(loss.data)}
    leaf_grads = {}
    for nid in range(len(graph.nodes) - 1, -1, -1):
        gout = grads.pop(nid, None)
        if gout is None:
            continue
        node = graph.nodes[nid]
        if node.op == "leaf":
            leaf_grads[nid] = gout
            continue
        if node.vjp is None:
            continue
        for iid, flow, gin in zip(node.input_ids, node.need, node.vjp(gout, node.need)):
            if not flow or gin is None:
                continue
            prev = grads.get(iid)
            grads[iid] = gin if prev is None else prev + gin
    result = {}
    for nid, node in enumerate(graph.nodes):
        if node.op == "leaf" and node.requires_grad:
            got = leaf_grads.get(nid)
            result[nid] = Tensor(got if got is not None else np.zeros(node.shape))
    return result


def _binary_shapes(a, b, op):
    """Elementwise shape rule: scalar-with-tensor broadcast or exact match."""
    if a.data.ndim != 0 and b.data.ndim != 0 and a.data.shape != b.data.shape:
        raise DimensionError(f"'{op}' shape mismatch: {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad, shape):
    # undo a scalar broadcast: sum everything down to the stored 0-d shape
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=np.float64).reshape(shape)


def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g, need):
        return (
            _reduce_to(g, ash) if need[0] else None,
            _reduce_to(g, bsh) if need[1] else None,
        )

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "sub")
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g, need):
        return (
            _reduce_to(g, ash) if need[0] else None,
            _reduce_to(-g, bsh) if need[1] else None,
        )

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g, need):
        return (
            _reduce_to(g * bd, ad.shape) if need[0] else None,
            _reduce_to(g * ad, bd.shape) if need[1] else None,
        )

    return _record("mul", ad * bd, (a, b), vjp)


def relu(t):
    t = _lift(t)
    td = t.data

    def vjp(g, need):
        return (g * (td > 0.0),)

    return _record("relu", np.maximum(td, 0.0), (t,), vjp)


def abs_(t):
    """Elementwise absolute value; subgradient 0 at the kink."""
    t = _lift(t)
    td = t.data

    def vjp(g, need):
        return (g * np.sign(td),)

    return _record("abs", np.abs(td), (t,), vjp)


def max_with_scalar(t, s):
    """Elementwise max(t, s); gradient flows only where t strictly exceeds s."""
    t = _lift(t)
    s = float(s)
    td = t.data

    def vjp(g, need):
        return (g * (td > s),)

    return _record("max_with_scalar", np.maximum(td, s), (t,), vjp)


def mean(t):
    t = _lift(t)
    shape, size = t.data.shape, t.data.size

    def vjp(g, need):
        return (np.full(shape, float(g) / size),)

    return _record("mean", np.asarray(t.data.mean()), (t,), vjp)


def tensor_sum(t):
    t = _lift(t)
    shape = t.data.shape

    def vjp(g, need):
        return (np.full(shape, float(g)),)

    return _record("sum", np.asarray(t.data.sum()), (t,), vjp)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs [m,k] @ [k,n], got {a.data.shape} and {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def vjp(g, need):
        return (
            g @ bd.T if need[0] else None,
            ad.T @ g if need[1] else None,
        )

    return _record("matmul", ad @ bd, (a, b), vjp)


def add_bias(t, bias):
    """Add a per-channel bias to [N,C] or [N,C,H,W] activations."""
    t, bias = _lift(t), _lift(bias)
    td, bd = t.data, bias.data
    if bd.ndim != 1 or td.ndim not in (2, 4) or td.shape[1] != bd.shape[0]:
        raise DimensionError(
            f"add_bias needs channel bias, got {td.shape} and {bd.shape}"
        )
    if td.ndim == 2:
        out = td + bd
        axes = (0,)
    else:
        out = td + bd[:, None, None]
        axes = (0, 2, 3)

    def vjp(g, need):
        return (
            g if need[0] else None,
            g.sum(axis=axes) if need[1] else None,
        )

    return _record("add_bias", out, (t, bias), vjp)


def conv2d(t, kernel, stride=1, padding=0, bias=None, relu_out=False):
    """2-D cross-correlation of [N,C,H,W] input with an [F,C,kh,kw] kernel.

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1 (same for
    width); differentiable with respect to input and kernel. An optional
    per-channel `bias` add and relu epilogue fuse into the same tape node,
    sparing two full-size intermediates on the backbone's hot path.
    """
    t, kernel = _lift(t), _lift(kernel)
    xd, wd = t.data, kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input/kernel, got {xd.shape}, {wd.shape}")
    n, c, h, w = xd.shape
    f, ck, kh, kw = wd.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1, padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if bias is not None:
        bias = _lift(bias)
        if bias.data.shape != (f,):
            raise DimensionError(f"conv2d bias must have shape ({f},), got {bias.data.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # im2col by kernel position: every copy keeps long contiguous runs, and
    # the (n, c*kh*kw, ho*wo) layout feeds a batched GEMM without transposes
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        buf = np.empty((n, c, kh, kw, ho, wo))
        for i in range(kh):
            for j in range(kw):
                buf[:, :, i, j] = xp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                                     j : j + (wo - 1) * stride + 1 : stride]
        cols = buf.reshape(n, c * kh * kw, ho * wo)
    wmat = wd.reshape(f, -1)
    out = np.matmul(wmat[None], cols).reshape(n, f, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None]
    if relu_out:
        np.maximum(out, 0.0, out=out)
        mask = out > 0.0

    def vjp(g, need):
        if relu_out:
            g = g * mask
        go = g.reshape(n, f, ho * wo)
        gw = None
        if need[1]:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, kh, kw)
        gx = None
        if need[0]:
            dcols = np.matmul(wmat.T[None], go).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = None
        if len(need) > 2 and need[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (t, kernel) if bias is None else (t, kernel, bias)
    return _record("conv2d", out, parents, vjp)


def avg_pool2d(t, k):
    """Non-overlapping k*k average pooling; spatial dims must divide by k."""
    t = _lift(t)
    xd = t.data
    if xd.ndim != 4:
        raise DimensionError(f"avg_pool2d needs a 4-D tensor, got {xd.shape}")
    n, c, h, w = xd.shape
    k = int(k)
    if k < 1 or h % k or w % k:
        raise DimensionError(f"avg_pool2d window {k} must divide spatial dims {h}x{w}")
    inv = 1.0 / (k * k)
    acc = xd[:, :, 0::k, 0::k].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                acc += xd[:, :, i::k, j::k]
    out = acc
    out *= inv

    def vjp(g, need):
        return (np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3),)

    return _record("avg_pool2d", out, (t,), vjp)


def flatten(t):
    """Collapse all but the leading (batch) axis."""
    t = _lift(t)
    xd = t.data
    if xd.ndim < 2:
        raise DimensionError(f"flatten needs at least 2 dims, got {xd.shape}")
    shape = xd.shape

    def vjp(g, need):
        return (g.reshape(shape),)

    return _record("flatten", xd.reshape(shape[0], -1), (t,), vjp)


def reshape(t, shape):
    t = _lift(t)
    old = t.data.shape

    def vjp(g, need):
        return (g.reshape(old),)

    return _record("reshape", t.data.reshape(shape), (t,), vjp)


def crop_batch(t, row0, col0, height, width):
    """Per-sample spatial crop: out[i] = t[i, :, row0[i]:+height, col0[i]:+width]."""
    t = _lift(t)
    xd = t.data
    if xd.ndim != 4:
        raise DimensionError(f"crop_batch needs a 4-D tensor, got {xd.shape}")
    n, c, h, w = xd.shape
    row0 = np.asarray(row0, dtype=np.int64).reshape(-1)
    col0 = np.asarray(col0, dtype=np.int64).reshape(-1)
    if row0.shape[0] != n or col0.shape[0] != n:
        raise DimensionError("crop_batch needs one origin per sample")
    if (row0 < 0).any() or (col0 < 0).any() or (row0 + height > h).any() or (col0 + width > w).any():
        raise DimensionError("crop_batch window leaves the tensor bounds")
    out = np.empty((n, c, height, width))
    for i in range(n):
        out[i] = xd[i, :, row0[i] : row0[i] + height, col0[i] : col0[i] + width]

    def vjp(g, need):
        gx = np.zeros((n, c, h, w))
        for i in range(n):
            gx[i, :, row0[i] : row0[i] + height, col0[i] : col0[i] + width] += g[i]
        return (gx,)

    return _record("crop_batch", out, (t,), vjp)


def topk_mean(t, count):
    """Row-wise mean of the `count` largest entries of a [N,L] tensor.

    Ties at the selection boundary resolve by (value desc, index asc);
    gradient flows only into the selected entries.
    """
    t = _lift(t)
    xd = t.data
    if xd.ndim != 2:
        raise DimensionError(f"topk_mean needs a 2-D tensor, got {xd.shape}")
    n, length = xd.shape
    count = int(count)
    if not 1 <= count <= length:
        raise DimensionError(f"topk_mean count {count} outside [1, {length}]")
    picked = np.argsort(-xd, axis=1, kind="stable")[:, :count]
    out = np.take_along_axis(xd, picked, axis=1).mean(axis=1)

    def vjp(g, need):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, picked, (g / count)[:, None], axis=1)
        return (gx,)

    return _record("topk_mean", out, (t,), vjp)
