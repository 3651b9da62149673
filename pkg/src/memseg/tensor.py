"""Minimal reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray; every op records a node (output, inputs, vjp
closure) on the active GradTape. backward() replays the tape in reverse,
accumulating adjoints additively so fan-out just works. Only leaf tensors
(ones not produced by an op on the current tape) receive a .grad.

Design constraints, enforced here so the rest of the stack can assume them:
float64 only, shape checks raise DimensionError, non-finite op outputs raise
NonFiniteError, and vjp closures are pure (no captured buffer is mutated),
which is what makes repeated backward() calls accumulate correctly.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor", "GradTape", "tensor", "active_tape", "use_tape", "no_grad",
    "backward", "finite_diff_check", "cosine_similarity",
    "add", "sub", "mul", "div", "neg", "matmul", "bmm", "attention",
    "transpose", "reshape", "softmax_lastdim", "log_softmax_lastdim",
    "masked_softmax_rows", "relu", "sigmoid", "absolute",
    "conv2d", "bilinear_resize", "window_partition", "window_merge",
    "window_stack", "window_unstack", "gather_rows", "scatter_rows",
    "concat_lastdim",
]


class Tensor:
    """Float64 array plus grad bookkeeping. Treat .data as frozen after
    construction; the optimizer's in-place weight update (between tapes) is
    the one sanctioned exception."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100  # keep numpy from absorbing us in mixed ops

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError("tensors must have positive extents, got shape %r"
                                 % (arr.shape,))
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite values in tensor of shape %r" % (arr.shape,))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor, got shape %r"
                                % (self.shape,))
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (self.shape, self.requires_grad)

    # -- operator sugar ----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method-style ops ----------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return _amax(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False):
    """Public factory: always copies, so caller-side mutation can't leak in."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape machinery


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Append-only op record. One module-level tape is active by default;
    use_tape() swaps in another for a scope."""

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        self._nodes.clear()


_active = GradTape()
_grad_enabled = True


def active_tape():
    return _active


@contextmanager
def use_tape(tape):
    global _active
    prev = _active
    _active = tape
    try:
        yield tape
    finally:
        _active = prev


@contextmanager
def no_grad():
    """Disable recording; outputs created inside come out requires_grad=False."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _needs_grad(*tensors):
    return _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _record(out, inputs, vjp):
    _active._nodes.append(_Node(out, inputs, vjp))


def backward(loss, tape=None):
    """Reverse-replay the tape from a scalar loss.

    Adjoints are kept in a scratch map during the walk and flushed into .grad
    only for leaves, so calling backward twice on the same tape adds the same
    gradient twice (documented accumulate-on-repeat behaviour).
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError("backward needs a scalar loss, got shape %r" % (loss.shape,))
    tape = tape if tape is not None else _active
    adj = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(tape._nodes):
        ent = adj.pop(id(node.out), None)
        if ent is None:
            continue  # not on any path to the loss
        grads = node.vjp(ent[1])
        for t, g in zip(node.inputs, grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            cur = adj.get(id(t))
            if cur is None:
                adj[id(t)] = [t, g]
            else:
                cur[1] = cur[1] + g
    for t, g in adj.values():
        if not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def _unbroadcast(g, shape):
    """Collapse a broadcasted gradient back to `shape` by summing the
    expanded axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce_pair(a, b, op_name):
    at = isinstance(a, Tensor)
    bt = isinstance(b, Tensor)
    if not at and not bt:
        raise ContractError("%s needs at least one Tensor operand" % op_name)
    ad = a.data if at else np.asarray(a, dtype=np.float64)
    bd = b.data if bt else np.asarray(b, dtype=np.float64)
    try:
        np.broadcast_shapes(ad.shape, bd.shape)
    except ValueError:
        raise DimensionError("%s: shapes %r and %r do not broadcast"
                             % (op_name, ad.shape, bd.shape))
    return at, bt, ad, bd


def add(a, b):
    at, bt, ad, bd = _coerce_pair(a, b, "add")
    out = Tensor(ad + bd, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = _unbroadcast(g, ad.shape) if at and a.requires_grad else None
            gb = _unbroadcast(g, bd.shape) if bt and b.requires_grad else None
            return ga, gb
        _record(out, (a, b), vjp)
    return out


def sub(a, b):
    at, bt, ad, bd = _coerce_pair(a, b, "sub")
    out = Tensor(ad - bd, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = _unbroadcast(g, ad.shape) if at and a.requires_grad else None
            gb = -_unbroadcast(g, bd.shape) if bt and b.requires_grad else None
            return ga, gb
        _record(out, (a, b), vjp)
    return out


def mul(a, b):
    at, bt, ad, bd = _coerce_pair(a, b, "mul")
    out = Tensor(ad * bd, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = _unbroadcast(g * bd, ad.shape) if at and a.requires_grad else None
            gb = _unbroadcast(g * ad, bd.shape) if bt and b.requires_grad else None
            return ga, gb
        _record(out, (a, b), vjp)
    return out


def div(a, b):
    at, bt, ad, bd = _coerce_pair(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        q = ad / bd  # non-finite results are rejected by the constructor
    out = Tensor(q, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = _unbroadcast(g / bd, ad.shape) if at and a.requires_grad else None
            gb = (_unbroadcast(-g * ad / (bd * bd), bd.shape)
                  if bt and b.requires_grad else None)
            return ga, gb
        _record(out, (a, b), vjp)
    return out


def neg(a):
    if not isinstance(a, Tensor):
        raise ContractError("neg needs a Tensor")
    out = Tensor(-a.data, requires_grad=_needs_grad(a))
    if out.requires_grad:
        _record(out, (a,), lambda g: (-g,))
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=_needs_grad(x))
    if out.requires_grad:
        mask = x.data > 0.0
        _record(out, (x,), lambda g: (g * mask,))
    return out


def sigmoid(x):
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s, requires_grad=_needs_grad(x))
    if out.requires_grad:
        _record(out, (x,), lambda g: (g * s * (1.0 - s),))
    return out


def absolute(x):
    out = Tensor(np.abs(x.data), requires_grad=_needs_grad(x))
    if out.requires_grad:
        sign = np.sign(x.data)  # sign(0) = 0: the subgradient we pick at the kink
        _record(out, (x,), lambda g: (g * sign,))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ContractError("matmul needs two Tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul is 2-D only, got %r @ %r" % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner extents differ: %r @ %r" % (a.shape, b.shape))
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb
        _record(out, (a, b), vjp)
    return out


def bmm(a, b):
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError("bmm is 3-D only, got %r @ %r" % (a.shape, b.shape))
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError("bmm batch/inner extents differ: %r @ %r"
                             % (a.shape, b.shape))
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = g @ b.data.transpose(0, 2, 1) if a.requires_grad else None
            gb = a.data.transpose(0, 2, 1) @ g if b.requires_grad else None
            return ga, gb
        _record(out, (a, b), vjp)
    return out


def transpose(x):
    """Swap the last two axes (plain transpose for 2-D)."""
    if x.ndim < 2:
        raise DimensionError("transpose needs >= 2 dims, got %r" % (x.shape,))
    perm = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    out = Tensor(np.ascontiguousarray(x.data.transpose(perm)),
                 requires_grad=_needs_grad(x))
    if out.requires_grad:
        _record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(perm)),))
    return out


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError("cannot reshape %r to %r" % (x.shape, shape))
    out = Tensor(x.data.reshape(shape), requires_grad=_needs_grad(x))
    if out.requires_grad:
        src = x.shape
        _record(out, (x,), lambda g: (g.reshape(src),))
    return out


# ---------------------------------------------------------------------------
# softmax family


def _softmax_last_inplace(a):
    a -= a.max(axis=-1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=-1, keepdims=True)
    return a


def softmax_lastdim(x):
    """Softmax over the last axis; numerically max-subtracted."""
    if x.ndim < 1:
        raise DimensionError("softmax needs >= 1 dim")
    s = _softmax_last_inplace(x.data.copy())
    out = Tensor(s, requires_grad=_needs_grad(x))
    if out.requires_grad:
        def vjp(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            return (s * (g - dot),)
        _record(out, (x,), vjp)
    return out


def log_softmax_lastdim(x):
    if x.ndim < 1:
        raise DimensionError("log_softmax needs >= 1 dim")
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    z = d - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse, requires_grad=_needs_grad(x))
    if out.requires_grad:
        soft = np.exp(z - lse)
        def vjp(g):
            return (g - soft * g.sum(axis=-1, keepdims=True),)
        _record(out, (x,), vjp)
    return out


def masked_softmax_rows(x, mask):
    """Row-wise softmax over a boolean mask; rows with no allowed entries
    come out all-zero instead of NaN. `mask` is a constant, not a Tensor."""
    if not isinstance(mask, np.ndarray) or mask.dtype != bool:
        raise ContractError("mask must be a boolean ndarray")
    if x.ndim != 2 or mask.shape != x.shape:
        raise DimensionError("masked_softmax_rows needs matching 2-D shapes, "
                             "got %r and %r" % (x.shape, mask.shape))
    a = np.where(mask, x.data, -np.inf)
    m = a.max(axis=-1, keepdims=True)
    m = np.where(np.isneginf(m), 0.0, m)  # empty rows: avoid inf-inf
    e = np.exp(a - m)
    tot = e.sum(axis=-1, keepdims=True)
    s = e / np.where(tot == 0.0, 1.0, tot)
    out = Tensor(s, requires_grad=_needs_grad(x))
    if out.requires_grad:
        def vjp(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            return (s * (g - dot),)  # zero where masked out or row empty
        _record(out, (x,), vjp)
    return out


def attention(q, k, v):
    """softmax(q k^T) v in one fused node (no scaling, by design).

    Accepts matching 2-D (T,d) or 3-D batched (B,T,d) operands. Fusing keeps
    the big (T,T) probability buffer out of the per-op finiteness checks and
    halves the number of T^2-sized passes; this is the hot path of training.
    """
    if q.ndim not in (2, 3) or k.ndim != q.ndim or v.ndim != q.ndim:
        raise DimensionError("attention needs matching 2-D or 3-D q/k/v")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError("attention extents mismatch: q %r k %r v %r"
                             % (q.shape, k.shape, v.shape))
    if q.ndim == 3 and not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise DimensionError("attention batch extents differ")
    kt = k.data.swapaxes(-1, -2)
    p = q.data @ kt
    _softmax_last_inplace(p)
    o = p @ v.data
    out = Tensor(o, requires_grad=_needs_grad(q, k, v))
    if out.requires_grad:
        def vjp(g):
            dp = g @ v.data.swapaxes(-1, -2)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
            gq = ds @ k.data if q.requires_grad else None
            gk = ds.swapaxes(-1, -2) @ q.data if k.requires_grad else None
            gv = p.swapaxes(-1, -2) @ g if v.requires_grad else None
            return gq, gk, gv
        _record(out, (q, k, v), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum(x, axis=None, keepdims=False):
    ax = _axis_tuple(axis, x.ndim)
    out_data = x.data.sum(axis=ax, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=_needs_grad(x))
    if out.requires_grad:
        src_shape = x.shape
        def vjp(g):
            if ax is not None and not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, src_shape).copy(),)
        _record(out, (x,), vjp)
    return out


def _mean(x, axis=None, keepdims=False):
    ax = _axis_tuple(axis, x.ndim)
    n = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    out_data = x.data.mean(axis=ax, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=_needs_grad(x))
    if out.requires_grad:
        src_shape = x.shape
        inv = 1.0 / n
        def vjp(g):
            if ax is not None and not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g * inv, src_shape).copy(),)
        _record(out, (x,), vjp)
    return out


def _amax(x, axis, keepdims=False):
    if axis is None:
        raise ContractError("max reduction needs an explicit axis")
    ax = axis % x.ndim
    out_data = x.data.max(axis=ax, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=_needs_grad(x))
    if out.requires_grad:
        idx = np.argmax(x.data, axis=ax)  # first hit wins on ties
        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, np.expand_dims(idx, ax), g, ax)
            return (gx,)
        _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# convolution


_conv_plans = {}


def _conv_plan(h, w, cin, kh, kw, stride, padding):
    key = (h, w, cin, kh, kw, stride, padding)
    plan = _conv_plans.get(key)
    if plan is None:
        ph, pw = h + 2 * padding, w + 2 * padding
        oh = (ph - kh) // stride + 1
        ow = (pw - kw) // stride + 1
        plan = (ph, pw, oh, ow)
        _conv_plans[key] = plan
    return plan


def conv2d(x, kernel, stride=1, padding=0, padding_mode="zeros"):
    """2-D cross-correlation, HWC layout, kernel (kh, kw, cin, cout).

    Odd kernels only. Output (oh, ow, cout) with oh = (h + 2p - kh)//stride + 1.
    padding_mode "zeros" pads with zeros, "edge" replicates the border (keeps
    the response of a spatially constant input constant).
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError("conv2d wants x (h,w,cin) and kernel (kh,kw,cin,cout)")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d kernels must be odd, got %dx%d" % (kh, kw))
    if kcin != cin:
        raise DimensionError("conv2d channel mismatch: input %d, kernel %d" % (cin, kcin))
    if stride < 1 or padding < 0:
        raise ContractError("conv2d needs stride >= 1 and padding >= 0")
    if padding_mode not in ("zeros", "edge"):
        raise ContractError("conv2d padding_mode must be 'zeros' or 'edge'")
    ph, pw, oh, ow = _conv_plan(h, w, cin, kh, kw, stride, padding)
    if kh > ph or kw > pw:
        raise DimensionError("conv2d kernel %dx%d larger than padded input %dx%d"
                             % (kh, kw, ph, pw))
    if padding and padding_mode == "edge":
        xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)),
                    mode="edge")
    elif padding:
        xp = np.zeros((ph, pw, cin))
        xp[padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(oh, ow, kh, kw, cin),
        strides=(sh * stride, sw * stride, sh, sw, sc))
    cols = view.reshape(oh * ow, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = Tensor((cols @ wmat).reshape(oh, ow, cout),
                 requires_grad=_needs_grad(x, kernel))
    if out.requires_grad:
        cols = cols.copy()  # detach from the strided view before xp can die
        def vjp(g):
            gmat = g.reshape(oh * ow, cout)
            gk = (cols.T @ gmat).reshape(kernel.shape) if kernel.requires_grad else None
            gx = None
            if x.requires_grad:
                dcols = (gmat @ wmat.T).reshape(oh, ow, kh, kw, cin)
                gp = np.zeros((ph, pw, cin))
                for i in range(kh):
                    for j in range(kw):
                        gp[i:i + stride * oh:stride,
                           j:j + stride * ow:stride] += dcols[:, :, i, j]
                if padding and padding_mode == "edge":
                    # fold replicated-border gradients onto their source pixels
                    rid = np.clip(np.arange(ph) - padding, 0, h - 1)
                    cid = np.clip(np.arange(pw) - padding, 0, w - 1)
                    tmp = np.zeros((h, pw, cin))
                    np.add.at(tmp, rid, gp)
                    gx = np.zeros((h, w, cin))
                    np.add.at(gx, (slice(None), cid), tmp)
                elif padding:
                    gx = gp[padding:padding + h, padding:padding + w]
                else:
                    gx = gp
            return gx, gk
        _record(out, (x, kernel), vjp)
    return out


# ---------------------------------------------------------------------------
# bilinear resize


_resize_plans = {}


def _resize_axis(n_in, n_out):
    d = np.arange(n_out, dtype=np.float64)
    src = (d + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    return i0, i1, t


def _resize_plan(h, w, oh, ow):
    key = (h, w, oh, ow)
    plan = _resize_plans.get(key)
    if plan is None:
        plan = (_resize_axis(h, oh), _resize_axis(w, ow))
        _resize_plans[key] = plan
    return plan


def bilinear_resize(x, out_h, out_w):
    """Separable bilinear resample (half-pixel centers). Resizing to the
    same extents reproduces the input exactly."""
    if x.ndim != 3:
        raise DimensionError("bilinear_resize wants (h,w,c), got %r" % (x.shape,))
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize target extents must be positive")
    h, w, _ = x.shape
    (i0, i1, ti), (j0, j1, tj) = _resize_plan(h, w, int(out_h), int(out_w))
    tiv = ti[:, None, None]
    tjv = tj[None, :, None]
    rows = x.data[i0] * (1.0 - tiv) + x.data[i1] * tiv
    out_data = rows[:, j0] * (1.0 - tjv) + rows[:, j1] * tjv
    out = Tensor(out_data, requires_grad=_needs_grad(x))
    if out.requires_grad:
        def vjp(g):
            grt = np.zeros((w, out_h, x.shape[2]))
            gt = g.transpose(1, 0, 2)
            np.add.at(grt, j0, gt * (1.0 - tj)[:, None, None])
            np.add.at(grt, j1, gt * tj[:, None, None])
            gr = grt.transpose(1, 0, 2)
            gx = np.zeros_like(x.data)
            np.add.at(gx, i0, gr * (1.0 - tiv))
            np.add.at(gx, i1, gr * tiv)
            return (gx,)
        _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# window ops


def _check_window(x, p):
    if x.ndim != 3:
        raise DimensionError("window ops want (h,w,c), got %r" % (x.shape,))
    h, w, _ = x.shape
    if p < 1:
        raise ContractError("window size must be >= 1")
    if h % p or w % p:
        raise DimensionError("window %d does not divide extents %dx%d (pad first)"
                             % (p, h, w))


def window_partition(x, p):
    """Split (h,w,c) into a row-major list of (p,p,c) tiles."""
    _check_window(x, p)
    h, w, c = x.shape
    outs = []
    for bi in range(h // p):
        for bj in range(w // p):
            hs, ws = bi * p, bj * p
            tile = Tensor(x.data[hs:hs + p, ws:ws + p].copy(),
                          requires_grad=_needs_grad(x))
            if tile.requires_grad:
                def vjp(g, hs=hs, ws=ws):
                    gx = np.zeros((h, w, c))
                    gx[hs:hs + p, ws:ws + p] = g
                    return (gx,)
                _record(tile, (x,), vjp)
            outs.append(tile)
    return outs


def window_merge(windows, h, w, p):
    """Inverse of window_partition for a row-major tile list."""
    if h % p or w % p:
        raise DimensionError("window %d does not divide extents %dx%d" % (p, h, w))
    nw = (h // p) * (w // p)
    if len(windows) != nw:
        raise DimensionError("expected %d windows, got %d" % (nw, len(windows)))
    c = windows[0].shape[-1]
    for t in windows:
        if t.shape != (p, p, c):
            raise DimensionError("window shape %r, expected %r" % (t.shape, (p, p, c)))
    out_data = np.empty((h, w, c))
    for idx, t in enumerate(windows):
        bi, bj = divmod(idx, w // p)
        out_data[bi * p:(bi + 1) * p, bj * p:(bj + 1) * p] = t.data
    out = Tensor(out_data, requires_grad=_needs_grad(*windows))
    if out.requires_grad:
        def vjp(g):
            grads = []
            for idx, t in enumerate(windows):
                if t.requires_grad:
                    bi, bj = divmod(idx, w // p)
                    grads.append(g[bi * p:(bi + 1) * p, bj * p:(bj + 1) * p].copy())
                else:
                    grads.append(None)
            return grads
        _record(out, tuple(windows), vjp)
    return out


def window_stack(x, p):
    """(h,w,c) -> (num_windows, p*p, c), row-major tiles, tokens row-major
    inside each tile. The batched-attention-friendly sibling of
    window_partition."""
    _check_window(x, p)
    h, w, c = x.shape
    nh, nwd = h // p, w // p
    out_data = (x.data.reshape(nh, p, nwd, p, c)
                .transpose(0, 2, 1, 3, 4)
                .reshape(nh * nwd, p * p, c))
    out = Tensor(out_data, requires_grad=_needs_grad(x))
    if out.requires_grad:
        def vjp(g):
            gx = (g.reshape(nh, nwd, p, p, c)
                  .transpose(0, 2, 1, 3, 4)
                  .reshape(h, w, c))
            return (np.ascontiguousarray(gx),)
        _record(out, (x,), vjp)
    return out


def window_unstack(x, h, w, p):
    """Inverse of window_stack."""
    if h % p or w % p:
        raise DimensionError("window %d does not divide extents %dx%d" % (p, h, w))
    nh, nwd = h // p, w // p
    if x.ndim != 3 or x.shape[0] != nh * nwd or x.shape[1] != p * p:
        raise DimensionError("window_unstack got %r, expected (%d, %d, c)"
                             % (x.shape, nh * nwd, p * p))
    c = x.shape[2]
    out_data = (x.data.reshape(nh, nwd, p, p, c)
                .transpose(0, 2, 1, 3, 4)
                .reshape(h, w, c))
    out = Tensor(np.ascontiguousarray(out_data), requires_grad=_needs_grad(x))
    if out.requires_grad:
        def vjp(g):
            gx = (g.reshape(nh, p, nwd, p, c)
                  .transpose(0, 2, 1, 3, 4)
                  .reshape(nh * nwd, p * p, c))
            return (np.ascontiguousarray(gx),)
        _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# row gather/scatter and concat


def gather_rows(x, idx):
    if x.ndim != 2:
        raise DimensionError("gather_rows wants a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("gather_rows needs a non-empty 1-D index array")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise DimensionError("gather_rows index out of range")
    out = Tensor(x.data[idx], requires_grad=_needs_grad(x))
    if out.requires_grad:
        n = x.shape[0]
        def vjp(g):
            gx = np.zeros((n, x.shape[1]))
            np.add.at(gx, idx, g)
            return (gx,)
        _record(out, (x,), vjp)
    return out


def scatter_rows(rows, idx, total):
    """Place rows at (unique) indices of a zero-initialised (total, c) tensor."""
    if rows.ndim != 2:
        raise DimensionError("scatter_rows wants a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (rows.shape[0],):
        raise DimensionError("scatter_rows index count %r != row count %d"
                             % (idx.shape, rows.shape[0]))
    if np.unique(idx).size != idx.size:
        raise ContractError("scatter_rows indices must be unique")
    if idx.min() < 0 or idx.max() >= total:
        raise DimensionError("scatter_rows index out of range")
    out_data = np.zeros((total, rows.shape[1]))
    out_data[idx] = rows.data
    out = Tensor(out_data, requires_grad=_needs_grad(rows))
    if out.requires_grad:
        _record(out, (rows,), lambda g: (g[idx].copy(),))
    return out


def concat_lastdim(a, b):
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError("concat_lastdim shapes %r / %r differ off the last axis"
                             % (a.shape, b.shape))
    out = Tensor(np.concatenate([a.data, b.data], axis=-1),
                 requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        na = a.shape[-1]
        def vjp(g):
            ga = g[..., :na].copy() if a.requires_grad else None
            gb = g[..., na:].copy() if b.requires_grad else None
            return ga, gb
        _record(out, (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# non-differentiable helpers


def cosine_similarity(a, b, eps=1e-8):
    """Plain-float cosine between two 1-D vectors (Tensor or ndarray)."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise DimensionError("cosine_similarity wants matching 1-D vectors")
    denom = max(float(np.linalg.norm(av)) * float(np.linalg.norm(bv)), eps)
    return float(np.clip(float(av @ bv) / denom, -1.0, 1.0))


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between tape gradients of scalar f(x) and central
    finite differences. Perturbs copies; x itself is untouched."""
    if not isinstance(x, Tensor):
        raise ContractError("finite_diff_check wants a Tensor probe point")
    base = np.array(x.data, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    with use_tape(GradTape()):
        y = f(probe)
        if not isinstance(y, Tensor) or y.size != 1:
            raise ContractError("finite_diff_check needs f to return a scalar Tensor")
        backward(y)
    ana = probe.grad if probe.grad is not None else np.zeros_like(base)
    num = np.empty_like(base)
    flat = base.reshape(-1)
    nflat = num.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
    return float(np.max(np.abs(ana - num) / denom))
