"""Minimal reverse-mode tape engine on numpy arrays.

Ops record onto the innermost active `Tape`; creation order is a
topological order, so `Tape.backward` walks the node list once in
reverse, accumulating vector-Jacobian products into leaf gradients.
Forward passes outside any tape context record nothing and behave as
plain numpy, which is the inference mode.

Tensors are float64 for training and verification; float32 data flows
through unchanged for inference.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ShapeError, UsageError

_TAPE_STACK = []


class Tape:
    """Ordered record of op output nodes for one forward pass."""

    def __init__(self):
        self.nodes = []

    @staticmethod
    def current():
        return _TAPE_STACK[-1] if _TAPE_STACK else None

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: "Tensor"):
        """Seed d(loss)/d(loss) = 1 and sweep the tape in reverse once."""
        if loss._tape is not self:
            raise UsageError("loss node was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._vjp is None:
                continue
            node._vjp(node.grad, node)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_track", "_vjp", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._track = requires_grad
        self._vjp = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, track={self._track})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def record(data, parents, vjp) -> Tensor:
    """Create an op output; registers `vjp(grad, out)` when a tape is live.

    This is the extension seam: custom ops accumulate into their
    parents' `.grad` inside vjp.
    """
    out = Tensor(data)
    tape = Tape.current()
    if tape is not None and any(p._track for p in parents):
        out._track = True
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t._track:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def vjp(g, _o):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return record(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def vjp(g, _o):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return record(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def vjp(g, _o):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return record(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def vjp(g, _o):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return record(a.data / b.data, (a, b), vjp)


def softplus(x):
    x = _as_tensor(x)
    d = x.data
    out = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0.0)
    def vjp(g, _o):
        _accum(x, g * _sigmoid(d))
    return record(out, (x,), vjp)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    def vjp(g, _o):
        _accum(x, g.reshape(x.data.shape))
    return record(x.data.reshape(shape), (x,), vjp)


def tensor_sum(x):
    x = _as_tensor(x)
    def vjp(g, _o):
        _accum(x, np.broadcast_to(g, x.data.shape).copy())
    return record(x.data.sum(), (x,), vjp)


def mean(x):
    x = _as_tensor(x)
    n = x.data.size
    def vjp(g, _o):
        _accum(x, np.broadcast_to(g / n, x.data.shape).copy())
    return record(x.data.mean(), (x,), vjp)


def concat_channels(parts):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    def vjp(g, _o):
        off = 0
        for p, s in zip(parts, sizes):
            _accum(p, g[off:off + s])
            off += s
    return record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def slice_channels(x, start, stop):
    x = _as_tensor(x)
    def vjp(g, _o):
        buf = np.zeros_like(x.data)
        buf[start:stop] = g
        _accum(x, buf)
    return record(x.data[start:stop].copy(), (x,), vjp)


def upsample2(x):
    """Nearest-neighbour x2 in the last two axes."""
    x = _as_tensor(x)
    d = x.data
    out = np.repeat(np.repeat(d, 2, axis=-2), 2, axis=-1)
    def vjp(g, _o):
        s = g.shape
        folded = g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1))
        _accum(x, folded)
    return record(out, (x,), vjp)


# ----------------------------------------------------------------- softmax


def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=axis, keepdims=True)
    return p


def _softmax_op(x, axis):
    x = _as_tensor(x)
    p = _softmax(x.data, axis)
    def vjp(g, _o):
        _accum(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))
    return record(p, (x,), vjp)


def softmax_lastdim(x):
    return _softmax_op(x, -1)


def softmax_channels(x):
    return _softmax_op(x, 0)


# ------------------------------------------------------------------ dense


def dense(x, w, b=None):
    """Matmul over the last axis: (..., D_in) @ (D_in, D_out) [+ bias]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"dense: {x.data.shape} incompatible with {w.data.shape}")
    def vjp(g, _o):
        gf = g.reshape(-1, w.data.shape[1])
        xf = x.data.reshape(-1, w.data.shape[0])
        _accum(w, xf.T @ gf)
        _accum(x, (gf @ w.data.T).reshape(x.data.shape))
    out = record(x.data @ w.data, (x, w), vjp)
    if b is not None:
        out = add(out, b)
    return out


def channel_dense(x, w, b=None):
    """Per-position linear map over channel axis 0 of a (C, L, H, W) tensor."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 2 or x.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"channel_dense: {x.data.shape} incompatible with {w.data.shape}")
    out_data = np.einsum("io,ilhw->olhw", w.data, x.data)
    def vjp(g, _o):
        _accum(w, np.einsum("ilhw,olhw->io", x.data, g))
        _accum(x, np.einsum("io,olhw->ilhw", w.data, g))
    out = record(out_data, (x, w), vjp)
    if b is not None:
        out = add(out, reshape(b, (w.data.shape[1], 1, 1, 1)))
    return out


# ------------------------------------------------------------------- convs


def _conv_core(x, k, stride, temporal_edge):
    """im2col convolution on (C, L, H, W) with same padding."""
    cout, cin, kt, kh, kw = k.shape
    pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xp = x
    if pt:
        if temporal_edge:
            xp = np.concatenate([xp[:, :1]] * pt + [xp] + [xp[:, -1:]] * pt, axis=1)
        else:
            xp = np.pad(xp, ((0, 0), (pt, pt), (0, 0), (0, 0)))
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    s = stride
    lo = xp.shape[1] - kt + 1
    ho = (xp.shape[2] - kh) // s + 1
    wo = (xp.shape[3] - kw) // s + 1
    cols = np.empty((cin, kt, kh, kw, lo * ho * wo), dtype=xp.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                sl = xp[:, dt:dt + lo, dh:dh + (ho - 1) * s + 1:s, dw:dw + (wo - 1) * s + 1:s]
                cols[:, dt, dh, dw, :] = sl.reshape(cin, -1)
    flat = cols.reshape(cin * kt * kh * kw, -1)
    out = (k.reshape(cout, -1) @ flat).reshape(cout, lo, ho, wo)
    return out, flat, (xp.shape, lo, ho, wo, s)


def _conv_op(x, k, b, stride, temporal_edge):
    x, k = _as_tensor(x), _as_tensor(k)
    out_data, cols_flat, meta = _conv_core(x.data, k.data, stride, temporal_edge)
    kshape = k.data.shape

    def vjp(g, _o):
        xp_shape, lo, ho, wo, s = meta
        cout, cin, kt, kh, kw = kshape
        pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
        gmat = g.reshape(cout, -1)
        _accum(k, (gmat @ cols_flat.T).reshape(kshape))
        if x._track:
            dcols = (k.data.reshape(cout, -1).T @ gmat).reshape(cin, kt, kh, kw, lo, ho, wo)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for dt in range(kt):
                for dh in range(kh):
                    for dw in range(kw):
                        dxp[:, dt:dt + lo, dh:dh + (ho - 1) * s + 1:s,
                            dw:dw + (wo - 1) * s + 1:s] += dcols[:, dt, dh, dw]
            h_in, w_in = x.data.shape[2], x.data.shape[3]
            dxp = dxp[:, :, ph:ph + h_in, pw:pw + w_in]
            if pt:
                core = dxp[:, pt:-pt].copy()
                if temporal_edge:
                    core[:, 0] += dxp[:, :pt].sum(axis=1)
                    core[:, -1] += dxp[:, -pt:].sum(axis=1)
                dxp = core
            _accum(x, dxp)

    out = record(out_data, (x, k), vjp)
    if b is not None:
        out = add(out, reshape(b, (kshape[0], 1, 1, 1)))
    return out


def conv_spatial(x, k, b=None, stride: int = 1):
    """1 x kh x kw convolution over (H, W), zero same-padding, optional stride."""
    xt, kt_ = _as_tensor(x), _as_tensor(k)
    if xt.data.ndim != 4:
        raise ShapeError(f"conv_spatial input must be (C, L, H, W), got {xt.data.shape}")
    if kt_.data.ndim != 5 or kt_.data.shape[2] != 1:
        raise ShapeError(f"conv_spatial kernel must be (Co, Ci, 1, kh, kw), got {kt_.data.shape}")
    if kt_.data.shape[3] % 2 == 0 or kt_.data.shape[4] % 2 == 0:
        raise ShapeError("conv_spatial kernel extents must be odd")
    if kt_.data.shape[1] != xt.data.shape[0]:
        raise ShapeError("conv_spatial channel mismatch")
    return _conv_op(xt, kt_, b, stride, temporal_edge=False)


def conv_temporal(x, k, b=None):
    """kt x 1 x 1 convolution over frames with replicate-edge padding."""
    xt, kt_ = _as_tensor(x), _as_tensor(k)
    if xt.data.ndim != 4:
        raise ShapeError(f"conv_temporal input must be (C, L, H, W), got {xt.data.shape}")
    if kt_.data.ndim != 5 or kt_.data.shape[3] != 1 or kt_.data.shape[4] != 1:
        raise ShapeError(f"conv_temporal kernel must be (Co, Ci, kt, 1, 1), got {kt_.data.shape}")
    if kt_.data.shape[2] % 2 == 0:
        raise ShapeError("conv_temporal tap count must be odd")
    if kt_.data.shape[1] != xt.data.shape[0]:
        raise ShapeError("conv_temporal channel mismatch")
    return _conv_op(xt, kt_, b, 1, temporal_edge=True)


# ------------------------------------------------------------------ losses


def mse(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    diff = a.data - b.data
    n = diff.size
    def vjp(g, _o):
        scaled = (2.0 / n) * g * diff
        _accum(a, scaled)
        _accum(b, -scaled)
    return record(np.mean(diff * diff), (a, b), vjp)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy from raw logits; stable for large |x|."""
    x, t = _as_tensor(logits), _as_tensor(targets)
    d, td = x.data, t.data
    val = np.mean(np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0.0) - d * td)
    n = d.size
    def vjp(g, _o):
        _accum(x, g * (_sigmoid(d) - td) / n)
        _accum(t, g * (-d) / n)
    return record(val, (x, t), vjp)


# ------------------------------------------------------------- parameters


class ParamSet:
    """Named leaf tensors with float64 data; insertion order is stable."""

    def __init__(self, arrays: dict):
        self._params = {}
        for name, value in arrays.items():
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            self._params[name] = Tensor(data.astype(np.float64), requires_grad=True)

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def clone(self) -> "ParamSet":
        return ParamSet(self.state_dict())

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet({})
        for name, t in self._params.items():
            out._params[name] = Tensor(t.data.astype(dtype), requires_grad=False)
        return out


# ------------------------------------------------------------ checkpoints

_CKPT_MAGIC = b"U4DP"


def save_checkpoint(state: dict, path) -> int:
    """Named float64 arrays to the binary checkpoint format."""
    parts = [_CKPT_MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        data = np.asarray(arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != _CKPT_MAGIC:
        raise FileFormatError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = off + 8 * n
            if end > len(raw):
                raise FileFormatError(f"{path}: truncated payload for entry {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off = end
    except struct.error as exc:
        raise FileFormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(raw):
        raise FileFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


# --------------------------------------------------------- gradient check


def finite_diff_check(fn, wrt, step: float = 1e-5) -> float:
    """Max relative error between backward() grads and central differences.

    `fn` must rebuild its graph on every call and be deterministic
    (freeze any noise source). `wrt` tensors should hold float64 data.
    """
    for t in wrt:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    worst = 0.0
    for t, g in zip(wrt, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-3)
            worst = max(worst, rel)
    return worst
