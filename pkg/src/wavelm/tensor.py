"""Reverse-mode autodiff over dense real arrays.

Define-by-run: every forward op appends a node to a global tape, and
backward() replays the tape in exact reverse execution order. The op set is
exactly what the codec and token LM need; anything else is a hard error.
Default dtype is float32; the gradient checker re-runs everything in float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

import numpy as np

DEFAULT_DTYPE = np.float32

_TINY = 1e-12  # guards divide-by-zero in sqrt/magnitude backward rules


class OpError(ValueError):
    """Shape/attribute/kind violation in a forward op."""


class GraphError(RuntimeError):
    """Misuse of the tape: non-scalar root, empty graph, detached root."""


class Tensor:
    """Dense array plus optional gradient buffer.

    Shape is fixed at construction; ops always build new tensors. Leaf
    tensors created with requires_grad=True start with a zero gradient so
    "never touched by backward" reads as a zero gradient, matching the
    calculus. Non-leaf gradients are allocated lazily during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}," \
               f" requires_grad={self.requires_grad}{tag})"

    # operator sugar; all dispatch through forward_op
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


class Node:
    """One executed op: inputs, output, and whatever backward needs."""

    __slots__ = ("op", "inputs", "output", "attrs", "saved")

    def __init__(self, op, inputs, output, attrs, saved):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.saved = saved


class _Tape(threading.local):
    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = True


_tape = _Tape()


def graph_nodes() -> list:
    return _tape.nodes


def reset_graph():
    _tape.nodes.clear()


class no_grad:
    """Context manager: forward passes inside record nothing."""

    def __enter__(self):
        self._prev = _tape.recording
        _tape.recording = False
        return self

    def __exit__(self, *exc):
        _tape.recording = self._prev
        return False


class OpDef:
    __slots__ = ("kind", "fwd", "bwd")

    def __init__(self, kind, fwd, bwd):
        self.kind = kind
        self.fwd = fwd
        self.bwd = bwd


OPS: dict[str, OpDef] = {}


def _register(kind: str, fwd: Callable, bwd: Callable):
    OPS[kind] = OpDef(kind, fwd, bwd)


def forward_op(kind: str, inputs: list, attrs: Optional[dict] = None) -> Tensor:
    """Run a registered op, recording a tape node when gradients are needed."""
    if kind not in OPS:
        raise OpError(f"unknown op kind: {kind!r}")
    attrs = attrs or {}
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise OpError(f"{kind}: mixed input dtypes {sorted(d.name for d in dtypes)}")
    op = OPS[kind]
    saved: dict = {}
    out_data = op.fwd(saved, [t.data for t in tensors], attrs)
    needs_grad = _tape.recording and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs_grad, dtype=out_data.dtype)
    if needs_grad:
        out.grad = None  # filled by backward; leaves keep their eager zeros
        _tape.nodes.append(Node(op, tensors, out, attrs, saved))
    return out


def backward(root: Tensor):
    """Populate gradients of every tensor the root depends on.

    Traverses the tape in exact reverse execution order; contributions to a
    tensor used several times accumulate additively. Consumes the tape.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    nodes = _tape.nodes
    if not nodes:
        raise GraphError("backward on empty graph")
    root_index = None
    for i in range(len(nodes) - 1, -1, -1):
        if nodes[i].output is root:
            root_index = i
            break
    if root_index is None:
        raise GraphError("root is not the output of any recorded op")

    contrib: dict[int, tuple[Tensor, np.ndarray]] = {
        id(root): (root, np.ones_like(root.data))}
    for node in reversed(nodes[: root_index + 1]):
        entry = contrib.pop(id(node.output), None)
        if entry is None:
            continue
        gout = entry[1]
        node.output.grad = gout
        gins = node.op.bwd(node.saved, [t.data for t in node.inputs], node.attrs, gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in contrib:
                np.add(contrib[key][1], g, out=contrib[key][1])
            else:
                contrib[key] = (t, np.array(g, dtype=t.data.dtype, copy=True))
    # what remains belongs to leaves (and to tensors made outside this graph)
    for t, g in contrib.values():
        if t.grad is None:
            t.grad = g
        else:
            t.grad += g
    reset_graph()


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def _broadcast_to_first(kind, a, b):
    try:
        bb = np.broadcast_to(b, a.shape)
    except ValueError:
        raise OpError(f"{kind}: cannot broadcast {b.shape} to {a.shape}") from None
    return bb


def _reduce_to_shape(g, shape):
    # sum gradient over axes the forward broadcast introduced
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _add_fwd(saved, arrays, attrs):
    a, b = arrays
    saved["b_shape"] = b.shape
    return a + _broadcast_to_first("add", a, b)


def _add_bwd(saved, arrays, attrs, g):
    return [g, _reduce_to_shape(g, saved["b_shape"])]


def _sub_fwd(saved, arrays, attrs):
    a, b = arrays
    if a.shape != b.shape:
        raise OpError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return a - b


def _sub_bwd(saved, arrays, attrs, g):
    return [g, -g]


def _mul_fwd(saved, arrays, attrs):
    a, b = arrays
    return a * _broadcast_to_first("mul", a, b)


def _mul_bwd(saved, arrays, attrs, g):
    a, b = arrays
    ga = g * _broadcast_to_first("mul", a, b)
    gb = _reduce_to_shape(g * a, b.shape)
    return [ga, gb]


def _scale_fwd(saved, arrays, attrs):
    (a,) = arrays
    return a * a.dtype.type(attrs["value"])


def _scale_bwd(saved, arrays, attrs, g):
    return [g * arrays[0].dtype.type(attrs["value"])]


def _sqrt_fwd(saved, arrays, attrs):
    (a,) = arrays
    out = np.sqrt(a)
    saved["out"] = out
    return out


def _sqrt_bwd(saved, arrays, attrs, g):
    return [g * 0.5 / np.maximum(saved["out"], _TINY)]


def _log_fwd(saved, arrays, attrs):
    (a,) = arrays
    eps = a.dtype.type(attrs.get("eps", 0.0))
    saved["shifted"] = a + eps
    return np.log(saved["shifted"])


def _log_bwd(saved, arrays, attrs, g):
    return [g / saved["shifted"]]


def _gelu_fwd(saved, arrays, attrs):
    (x,) = arrays
    c = x.dtype.type(0.7978845608028654)  # sqrt(2/pi)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    saved["t"] = t
    saved["inner_slope"] = c * (1 + 3 * k * x * x)
    return 0.5 * x * (1 + t)


def _gelu_bwd(saved, arrays, attrs, g):
    (x,) = arrays
    t = saved["t"]
    dy = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * saved["inner_slope"]
    return [g * dy]


def _sum_fwd(saved, arrays, attrs):
    return np.asarray(arrays[0].sum(), dtype=arrays[0].dtype)


def _sum_bwd(saved, arrays, attrs, g):
    return [np.full_like(arrays[0], g.reshape(()))]


def _mean_fwd(saved, arrays, attrs):
    return np.asarray(arrays[0].mean(), dtype=arrays[0].dtype)


def _mean_bwd(saved, arrays, attrs, g):
    a = arrays[0]
    return [np.full_like(a, g.reshape(()) / a.dtype.type(a.size))]


def _l1_fwd(saved, arrays, attrs):
    a, b = arrays
    if a.shape != b.shape:
        raise OpError(f"l1_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    saved["sign"] = np.sign(diff)
    return np.asarray(np.abs(diff).mean(), dtype=a.dtype)


def _l1_bwd(saved, arrays, attrs, g):
    a = arrays[0]
    s = saved["sign"] * (g.reshape(()) / a.dtype.type(a.size))
    return [s, -s]


# ---------------------------------------------------------------------------
# shape ops

def _reshape_fwd(saved, arrays, attrs):
    (a,) = arrays
    shape = tuple(attrs["shape"])
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise OpError(f"reshape: cannot reshape {a.shape} to {shape}")
    return a.reshape(shape)


def _reshape_bwd(saved, arrays, attrs, g):
    return [g.reshape(arrays[0].shape)]


def _transpose_fwd(saved, arrays, attrs):
    (a,) = arrays
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(a.ndim)):
        raise OpError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    return np.ascontiguousarray(a.transpose(axes))


def _transpose_bwd(saved, arrays, attrs, g):
    inv = np.argsort(attrs["axes"])
    return [np.ascontiguousarray(g.transpose(tuple(inv)))]


# ---------------------------------------------------------------------------
# linear algebra

def _matmul_fwd(saved, arrays, attrs):
    a, b = arrays
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 2 and a.shape[2] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0]
            and a.shape[2] == b.shape[1])
    )
    if not ok:
        raise OpError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(saved, arrays, attrs, g):
    a, b = arrays
    if b.ndim == 2:
        ga = g @ b.T
        if a.ndim == 2:
            gb = a.T @ g
        else:  # [B,n,k] @ [k,m]: pool the batch for the weight grad
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        ga = g @ b.transpose(0, 2, 1)
        gb = a.transpose(0, 2, 1) @ g
    return [ga, gb]


# ---------------------------------------------------------------------------
# convolutions (channels-first: [batch, channels, time])

def conv1d_out_len(t: int, kernel: int, stride: int, pad: int) -> int:
    return (t + 2 * pad - kernel) // stride + 1


def _conv_cols(xp, kernel, stride, t_out):
    # [B, C, Tp] -> [B*T_out, C*kernel] patch matrix
    b, c, tp = xp.shape
    sb, sc, st = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, t_out, kernel), strides=(sb, sc, st * stride, st),
        writeable=False)
    return np.ascontiguousarray(view.transpose(0, 2, 1, 3)).reshape(b * t_out, c * kernel)


def _conv1d_fwd(saved, arrays, attrs):
    x, w = arrays
    stride, pad = int(attrs.get("stride", 1)), int(attrs.get("pad", 0))
    if stride < 1 or pad < 0:
        raise OpError(f"conv1d: bad stride/pad ({stride}, {pad})")
    if x.ndim != 3 or w.ndim != 3:
        raise OpError(f"conv1d: need [B,C,T] and [Cout,Cin,k], got {x.shape}, {w.shape}")
    b, c_in, t = x.shape
    c_out, c_in_w, kernel = w.shape
    if c_in != c_in_w:
        raise OpError(f"conv1d: input channels {c_in} != kernel channels {c_in_w}")
    if t + 2 * pad < kernel:
        raise OpError(f"conv1d: time axis {t} (+2*{pad}) shorter than kernel {kernel}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    t_out = conv1d_out_len(t, kernel, stride, pad)
    cols = _conv_cols(xp, kernel, stride, t_out)
    out = cols @ w.reshape(c_out, c_in * kernel).T
    saved["cols"] = cols
    return np.ascontiguousarray(out.reshape(b, t_out, c_out).transpose(0, 2, 1))


def _conv1d_bwd(saved, arrays, attrs, g):
    x, w = arrays
    stride, pad = int(attrs.get("stride", 1)), int(attrs.get("pad", 0))
    b, c_in, t = x.shape
    c_out, _, kernel = w.shape
    t_out = g.shape[2]
    g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(b * t_out, c_out)
    gw = (g2.T @ saved["cols"]).reshape(c_out, c_in, kernel)
    gcols = (g2 @ w.reshape(c_out, c_in * kernel)).reshape(b, t_out, c_in, kernel)
    gcols = gcols.transpose(0, 2, 1, 3)  # [B, C, T_out, k]
    gxp = np.zeros((b, c_in, t + 2 * pad), dtype=x.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(kernel):
        gxp[:, :, j:j + span:stride] += gcols[:, :, :, j]
    gx = gxp[:, :, pad:pad + t] if pad else gxp
    return [np.ascontiguousarray(gx), gw]


def conv_transpose1d_out_len(t: int, kernel: int, stride: int, pad: int) -> int:
    return (t - 1) * stride + kernel - 2 * pad


def _convt1d_fwd(saved, arrays, attrs):
    x, w = arrays
    stride, pad = int(attrs.get("stride", 1)), int(attrs.get("pad", 0))
    if stride < 1 or pad < 0:
        raise OpError(f"conv_transpose1d: bad stride/pad ({stride}, {pad})")
    if x.ndim != 3 or w.ndim != 3:
        raise OpError(
            f"conv_transpose1d: need [B,C,T] and [Cin,Cout,k], got {x.shape}, {w.shape}")
    b, c_in, t = x.shape
    c_in_w, c_out, kernel = w.shape
    if c_in != c_in_w:
        raise OpError(f"conv_transpose1d: input channels {c_in} != kernel {c_in_w}")
    full = (t - 1) * stride + kernel
    t_out = full - 2 * pad
    if t_out < 1:
        raise OpError(f"conv_transpose1d: output length {t_out} < 1")
    x2 = np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(b * t, c_in)
    u = (x2 @ w.reshape(c_in, c_out * kernel)).reshape(b, t, c_out, kernel)
    u = u.transpose(0, 2, 1, 3)  # [B, Cout, T, k]
    yfull = np.zeros((b, c_out, full), dtype=x.dtype)
    span = stride * (t - 1) + 1
    for j in range(kernel):
        yfull[:, :, j:j + span:stride] += u[:, :, :, j]
    saved["x2"] = x2
    return np.ascontiguousarray(yfull[:, :, pad:pad + t_out])


def _convt1d_bwd(saved, arrays, attrs, g):
    x, w = arrays
    stride, pad = int(attrs.get("stride", 1)), int(attrs.get("pad", 0))
    b, c_in, t = x.shape
    _, c_out, kernel = w.shape
    full = (t - 1) * stride + kernel
    gfull = np.zeros((b, c_out, full), dtype=g.dtype)
    gfull[:, :, pad:pad + g.shape[2]] = g
    # gather the adjoint patches: gu[b,o,t,j] = gfull[b,o,t*stride+j]
    sb, sc, st = gfull.strides
    gu = np.lib.stride_tricks.as_strided(
        gfull, shape=(b, c_out, t, kernel), strides=(sb, sc, st * stride, st),
        writeable=False)
    gu2 = np.ascontiguousarray(gu.transpose(0, 2, 1, 3)).reshape(b * t, c_out * kernel)
    gx = (gu2 @ w.reshape(c_in, c_out * kernel).T).reshape(b, t, c_in)
    gw = (saved["x2"].T @ gu2).reshape(c_in, c_out, kernel)
    return [np.ascontiguousarray(gx.transpose(0, 2, 1)), gw]


# ---------------------------------------------------------------------------
# neural-net specific ops

def _embedding_fwd(saved, arrays, attrs):
    (table,) = arrays
    ids = np.asarray(attrs["ids"])
    if table.ndim != 2:
        raise OpError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise OpError(
            f"embedding: id out of range [0, {table.shape[0]}), got "
            f"[{ids.min()}, {ids.max()}]")
    saved["ids"] = ids
    return table[ids]


def _embedding_bwd(saved, arrays, attrs, g):
    table = arrays[0]
    ids = saved["ids"]
    gt = np.zeros_like(table)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return [gt]


def _layernorm_fwd(saved, arrays, attrs):
    x, gamma, beta = arrays
    eps = x.dtype.type(attrs.get("eps", 1e-5))
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise OpError(
            f"layernorm: gamma/beta must be ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    saved["xhat"] = xhat
    saved["inv"] = inv
    return xhat * gamma + beta


def _layernorm_bwd(saved, arrays, attrs, g):
    x, gamma, _ = arrays
    xhat, inv = saved["xhat"], saved["inv"]
    d = x.shape[-1]
    gg = g * gamma
    gx = (gg - gg.mean(axis=-1, keepdims=True)
          - xhat * (gg * xhat).mean(axis=-1, keepdims=True)) * inv
    axes = tuple(range(x.ndim - 1))
    return [gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)]


def _softmax_fwd(saved, arrays, attrs):
    (x,) = arrays
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    saved["y"] = y
    return y


def _softmax_bwd(saved, arrays, attrs, g):
    y = saved["y"]
    return [(g - (g * y).sum(axis=-1, keepdims=True)) * y]


def _frame_fwd(saved, arrays, attrs):
    (x,) = arrays
    size, hop = int(attrs["size"]), int(attrs["hop"])
    if size < 1 or hop < 1:
        raise OpError(f"frame: bad size/hop ({size}, {hop})")
    t = x.shape[-1]
    if t < size:
        raise OpError(f"frame: time axis {t} shorter than frame size {size}")
    n_frames = (t - size) // hop + 1
    st = x.strides[-1]
    view = np.lib.stride_tricks.as_strided(
        x, shape=x.shape[:-1] + (n_frames, size),
        strides=x.strides[:-1] + (st * hop, st), writeable=False)
    return np.ascontiguousarray(view)


def _frame_bwd(saved, arrays, attrs, g):
    x = arrays[0]
    size, hop = int(attrs["size"]), int(attrs["hop"])
    n_frames = g.shape[-2]
    gx = np.zeros_like(x)
    span = hop * (n_frames - 1) + 1
    for j in range(size):
        gx[..., j:j + span:hop] += g[..., :, j]
    return [gx]


_dft_bases: dict = {}


def _dft_basis(n: int, dtype):
    key = (n, np.dtype(dtype).name)
    if key not in _dft_bases:
        t = np.arange(n)[:, None]
        k = np.arange(n // 2 + 1)[None, :]
        ang = 2.0 * np.pi * t * k / n
        _dft_bases[key] = (np.cos(ang).astype(dtype), (-np.sin(ang)).astype(dtype))
    return _dft_bases[key]


def _stft_mag_fwd(saved, arrays, attrs):
    (frames,) = arrays
    if frames.ndim < 2:
        raise OpError(f"stft_mag: need [..., frames, size], got {frames.shape}")
    n = frames.shape[-1]
    cosb, sinb = _dft_basis(n, frames.dtype)
    re = frames @ cosb
    im = frames @ sinb
    mag = np.sqrt(re * re + im * im)
    saved["re"], saved["im"], saved["mag"] = re, im, mag
    return mag


def _stft_mag_bwd(saved, arrays, attrs, g):
    frames = arrays[0]
    n = frames.shape[-1]
    cosb, sinb = _dft_basis(n, frames.dtype)
    denom = np.maximum(saved["mag"], _TINY)
    gre = g * saved["re"] / denom
    gim = g * saved["im"] / denom
    return [gre @ cosb.T + gim @ sinb.T]


def _xent_fwd(saved, arrays, attrs):
    (logits,) = arrays
    targets = np.asarray(attrs["targets"], dtype=np.int64)
    ignore = int(attrs.get("ignore_index", -1))
    if logits.ndim != 2:
        raise OpError(f"cross_entropy: logits must be [N, vocab], got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise OpError(
            f"cross_entropy: targets shape {targets.shape} != ({logits.shape[0]},)")
    keep = targets != ignore
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise OpError("cross_entropy: every target is the ignore marker")
    valid = targets[keep]
    if valid.min() < 0 or valid.max() >= logits.shape[1]:
        raise OpError(
            f"cross_entropy: target id out of range [0, {logits.shape[1]})")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    sums = e.sum(axis=1, keepdims=True)
    logp = z - np.log(sums)
    nll = -logp[np.arange(logits.shape[0]), np.where(keep, targets, 0)]
    saved["probs"] = e / sums
    saved["keep"] = keep
    saved["n_keep"] = n_keep
    saved["targets"] = targets
    return np.asarray((nll * keep).sum() / n_keep, dtype=logits.dtype)


def _xent_bwd(saved, arrays, attrs, g):
    logits = arrays[0]
    keep, n_keep, targets = saved["keep"], saved["n_keep"], saved["targets"]
    gl = saved["probs"].copy()
    rows = np.arange(logits.shape[0])
    gl[rows, np.where(keep, targets, 0)] -= 1.0
    gl *= (keep[:, None] * g.reshape(())) / logits.dtype.type(n_keep)
    return [gl]


for _kind, _fwd, _bwd in [
    ("add", _add_fwd, _add_bwd),
    ("sub", _sub_fwd, _sub_bwd),
    ("mul", _mul_fwd, _mul_bwd),
    ("scale", _scale_fwd, _scale_bwd),
    ("sqrt", _sqrt_fwd, _sqrt_bwd),
    ("log", _log_fwd, _log_bwd),
    ("gelu", _gelu_fwd, _gelu_bwd),
    ("sum", _sum_fwd, _sum_bwd),
    ("mean", _mean_fwd, _mean_bwd),
    ("l1_distance", _l1_fwd, _l1_bwd),
    ("reshape", _reshape_fwd, _reshape_bwd),
    ("transpose", _transpose_fwd, _transpose_bwd),
    ("matmul", _matmul_fwd, _matmul_bwd),
    ("conv1d", _conv1d_fwd, _conv1d_bwd),
    ("conv_transpose1d", _convt1d_fwd, _convt1d_bwd),
    ("embedding", _embedding_fwd, _embedding_bwd),
    ("layernorm", _layernorm_fwd, _layernorm_bwd),
    ("softmax", _softmax_fwd, _softmax_bwd),
    ("frame", _frame_fwd, _frame_bwd),
    ("stft_mag", _stft_mag_fwd, _stft_mag_bwd),
    ("cross_entropy_with_logits", _xent_fwd, _xent_bwd),
]:
    _register(_kind, _fwd, _bwd)


# thin wrappers, one per op kind
def add(a, b):
    return forward_op("add", [a, b])


def sub(a, b):
    return forward_op("sub", [a, b])


def mul(a, b):
    return forward_op("mul", [a, b])


def scale(a, value: float):
    return forward_op("scale", [a], {"value": value})


def sqrt(a):
    return forward_op("sqrt", [a])


def log(a, eps: float = 0.0):
    return forward_op("log", [a], {"eps": eps})


def gelu(a):
    return forward_op("gelu", [a])


def sum_all(a):
    return forward_op("sum", [a])


def mean_all(a):
    return forward_op("mean", [a])


def l1_distance(a, b):
    return forward_op("l1_distance", [a, b])


def reshape(a, shape):
    return forward_op("reshape", [a], {"shape": tuple(shape)})


def transpose(a, axes):
    return forward_op("transpose", [a], {"axes": tuple(axes)})


def matmul(a, b):
    return forward_op("matmul", [a, b])


def conv1d(x, w, stride: int = 1, pad: int = 0):
    return forward_op("conv1d", [x, w], {"stride": stride, "pad": pad})


def conv_transpose1d(x, w, stride: int = 1, pad: int = 0):
    return forward_op("conv_transpose1d", [x, w], {"stride": stride, "pad": pad})


def embedding(table, ids):
    return forward_op("embedding", [table], {"ids": np.asarray(ids)})


def layernorm(x, gamma, beta, eps: float = 1e-5):
    return forward_op("layernorm", [x, gamma, beta], {"eps": eps})


def softmax(x):
    return forward_op("softmax", [x])


def frame(x, size: int, hop: int):
    return forward_op("frame", [x], {"size": size, "hop": hop})


def stft_mag(frames):
    return forward_op("stft_mag", [frames])


def cross_entropy_with_logits(logits, targets, ignore_index: int = -1):
    return forward_op(
        "cross_entropy_with_logits", [logits],
        {"targets": np.asarray(targets), "ignore_index": ignore_index})
