"""Dense channels-last tensors with a reverse-mode differentiation tape.

Every op takes and returns :class:`Tensor` values backed by numpy arrays.
When a :class:`Tape` is active and any input requires a gradient, the op
records a node carrying a closure that maps the output gradient to input
gradients. ``Tape.backward`` replays the nodes in strict reverse order.

Index arguments (top-k indices, kept positions, edge targets) are plain
integer numpy arrays and never carry gradient.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 4
EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_default_dtype = contextvars.ContextVar("tcsa_default_dtype", default=np.float32)
_active_tape = contextvars.ContextVar("tcsa_active_tape", default=None)
_scope = contextvars.ContextVar("tcsa_scope", default=())


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, scope: str = ""):
        where = f" in layer '{scope}'" if scope else ""
        super().__init__(f"non-finite value produced by {op}{where}")
        self.op = op
        self.scope = scope


class TapeError(RuntimeError):
    pass


def get_default_dtype():
    return _default_dtype.get()


@contextlib.contextmanager
def default_dtype(dtype):
    token = _default_dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def layer_scope(name: str):
    """Name the layer that ops run under, for non-finite error messages."""
    token = _scope.set(_scope.get() + (name,))
    try:
        yield
    finally:
        _scope.reset(token)


def current_scope() -> str:
    return ".".join(_scope.get())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _infer_dtype(data))
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{g}, op={self._op})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return get_default_dtype()


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or get_default_dtype()))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or get_default_dtype()))


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside record onto it.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False
    _token: object = field(default=None, repr=False)

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward; record a new one")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor recorded on ``tape``."""
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise TapeError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                seen[id(t)] = t
        g = grads.pop(id(node.output), None)
        node.output.grad = g if g is not None else np.zeros_like(node.output.data)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input {t.shape}")
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
    for key, t in seen.items():
        g = grads.get(key)
        if t._op == "leaf" or t.grad is None:
            t.grad = (g if g is not None else np.zeros_like(t.data)).astype(t.dtype, copy=False)
    tape.consumed = True


def _make(out: np.ndarray, op: str, inputs: Sequence, backward_fn: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op, current_scope())
    t = Tensor.__new__(Tensor)
    out = np.ascontiguousarray(out)
    if out.ndim > MAX_RANK:
        raise ShapeError(f"{op}: rank {out.ndim} exceeds {MAX_RANK}")
    out.flags.writeable = False
    t.data = out
    t.grad = None
    t._op = op
    tape = _active_tape.get()
    needs = any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
    t.requires_grad = bool(tape is not None and needs)
    if t.requires_grad:
        tape.nodes.append(Node(op, tuple(inputs), t, backward_fn))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = x.dtype.type(_GELU_C)
    inner = c * (d + 0.044715 * d ** 3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * d ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th ** 2) * dinner),)

    return _make(out.astype(x.dtype, copy=False), "gelu", (x,), bw)


# ---------------------------------------------------------------------------
# shape utilities


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], "slice", (a,), bw)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(ts)
    if not ts:
        raise ShapeError("concat of no tensors")
    axis = axis % ts[0].ndim
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _make(out, "concat", ts, bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis))
        start += s
    return out


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    return concat(ts, axis=-1)


def split_rows(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    return split(a, sizes, axis=0)


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """Depth-to-space: out[b, h*f+i, w*f+j, c] = x[b, h, w, (i*f+j)*C_out + c]."""
    b, h, w, c = x.shape
    f = int(factor)
    if c % (f * f):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {f * f}")
    co = c // (f * f)
    out = x.data.reshape(b, h, w, f, f, co).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * f, w * f, co)

    def bw(g):
        return (g.reshape(b, h, f, w, f, co).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c),)

    return _make(out, "pixel_shuffle", (x,), bw)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gap_tokens(x: Tensor) -> Tensor:
    """Average over the token extent: [N x C] -> [1 x C]."""
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"gap_tokens expects non-empty [N x C], got {x.shape}")
    return mean(x, axis=0, keepdims=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {e}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by the row max."""
    if a.shape[-1] == 0:
        raise ShapeError("softmax_rows: empty row extent")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax_rows", (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.shape[-1] == 0:
        raise ShapeError("log_softmax_rows: empty row extent")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax_rows", (a,), bw)


# ---------------------------------------------------------------------------
# selection, gather and scatter


def topk_indices(a: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row, descending; ties to lower index."""
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk: k={k} outside [1, {n}]")
    return np.argsort(-a, axis=-1, kind="stable")[..., :k]


def take_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., i, j] = a[..., i, idx[..., i, j]]; gradient flows to selected entries."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"take_cols: index shape {idx.shape} vs {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise IndexError("take_cols: index out of range")
    out = np.take_along_axis(a.data, idx, axis=-1)

    def bw(g):
        flat = np.zeros_like(a.data).reshape(-1, a.shape[-1])
        rows = np.repeat(np.arange(flat.shape[0]), idx.shape[-1])
        np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
        return (flat.reshape(a.shape),)

    return _make(out, "take_cols", (a,), bw)


def topk_rows(a: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    idx = topk_indices(a.data, k)
    return take_cols(a, idx), idx


def gather_rows(v: Tensor, idx: np.ndarray) -> Tensor:
    """v [..., K, C], idx [..., N, k] -> [..., N, k, C] with out[.., i, j, :] = v[.., idx[.., i, j], :]."""
    idx = np.asarray(idx, dtype=np.int64)
    lead = v.shape[:-2]
    if idx.ndim != len(lead) + 2 or idx.shape[:-2] != lead:
        raise ShapeError(f"gather_rows: index shape {idx.shape} vs values {v.shape}")
    K, C = v.shape[-2:]
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise IndexError(f"gather_rows: index out of range [0, {K})")
    nb = int(np.prod(lead)) if lead else 1
    vf = v.data.reshape(nb, K, C)
    idf = idx.reshape(nb, *idx.shape[-2:])
    batch = np.arange(nb)[:, None, None]
    out = vf[batch, idf].reshape(*idx.shape, C)

    def bw(g):
        gv = np.zeros((nb * K, C), dtype=v.dtype)
        flat = (idf + batch * K).reshape(-1)
        np.add.at(gv, flat, g.reshape(-1, C))
        return (gv.reshape(v.shape),)

    return _make(out, "gather_rows", (v,), bw)


def index_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Take rows (axis 0) by a 1-D index list."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index_rows: index out of range [0, {n})")

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], "index_rows", (x,), bw)


def index_add(src: Tensor, positions: np.ndarray, length: int) -> Tensor:
    """Zeros of ``length`` rows with src rows summed into ``positions`` (duplicates allowed)."""
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if positions.shape[0] != src.shape[0]:
        raise ShapeError(f"index_add: {positions.shape[0]} positions for {src.shape[0]} rows")
    if positions.size and (positions.min() < 0 or positions.max() >= length):
        raise IndexError(f"index_add: position out of range [0, {length})")
    out = np.zeros((length,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, positions, src.data)
    return _make(out, "index_add", (src,), lambda g: (g[positions],))


def scatter_rows(src: Tensor, positions: np.ndarray, length: int) -> Tensor:
    """Place src rows at strictly increasing ``positions`` of a zero [length x C] tensor."""
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if positions.size > 1 and np.any(np.diff(positions) <= 0):
        raise ValueError("scatter_rows: positions must be strictly increasing")
    return index_add(src, positions, length)


# ---------------------------------------------------------------------------
# convolutions (channels-last)


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    cin = x.shape[-1]
    if w.ndim != 2 or w.shape[0] != cin:
        raise ShapeError(f"conv1x1: weight {w.shape} does not match {cin} input channels")
    xf = x.data.reshape(-1, cin)
    out = xf @ w.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*x.shape[:-1], w.shape[1])
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gf = g.reshape(-1, w.shape[1])
        grads = ((gf @ w.data.T).reshape(x.shape), xf.T @ gf)
        return grads if bias is None else grads + (gf.sum(axis=0),)

    return _make(out, "conv1x1", inputs, bw)


def _pad_hw(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return a
    return np.pad(a, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def dwconv(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise conv, stride 1, zero padding (k-1)/2. w is [C x kH x kW]."""
    if x.ndim != 4:
        raise ShapeError(f"dwconv expects [B,H,W,C], got {x.shape}")
    B, H, W, C = x.shape
    c_w, kh, kw = w.shape
    if c_w != C:
        raise ShapeError(f"dwconv: weight for {c_w} channels, input has {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"dwconv: kernel {kh}x{kw} must be odd")
    ph, pw = kh // 2, kw // 2
    xp = _pad_hw(x.data, ph, pw)
    wt = w.data.transpose(1, 2, 0)  # [kH, kW, C]
    out = np.zeros((B, H, W, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + H, j:j + W, :] * wt[i, j]
    if bias is not None:
        out += bias.data
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros((kh, kw, C), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + H, j:j + W, :] += g * wt[i, j]
                gw[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i:i + H, j:j + W, :], g)
        gx = gxp[:, ph:ph + H, pw:pw + W, :]
        grads = (np.ascontiguousarray(gx), gw.transpose(2, 0, 1))
        return grads if bias is None else grads + (g.sum(axis=(0, 1, 2)),)

    return _make(out, "dwconv", inputs, bw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense conv, w is [kH x kW x C_in x C_out]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B,H,W,C], got {x.shape}")
    B, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ShapeError(f"conv2d: weight for {cin} channels, input has {C}")
    s, p = stride, padding
    ho = (H + 2 * p - kh) // s + 1
    wo = (W + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw}")
    xp = _pad_hw(x.data, p, p)
    cols = np.empty((B, ho, wo, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    cols2 = cols.reshape(-1, kh * kw * C)
    wm = w.data.reshape(kh * kw * C, cout)
    out = cols2 @ wm
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, ho, wo, cout)
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gf = g.reshape(-1, cout)
        gw = (cols2.T @ gf).reshape(w.shape)
        gcols = (gf @ wm.T).reshape(B, ho, wo, kh, kw, C)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += gcols[:, :, :, i, j, :]
        gx = np.ascontiguousarray(gxp[:, p:p + H, p:p + W, :])
        grads = (gx, gw)
        return grads if bias is None else grads + (gf.sum(axis=0),)

    return _make(out, "conv2d", inputs, bw)


# ---------------------------------------------------------------------------
# normalization


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS) -> Tensor:
    """Normalize each token over the channel (last) axis, then apply gamma, beta."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(d.ndim - 1))
        return gx, (g * xhat).sum(axis=red).reshape(gamma.shape), g.sum(axis=red).reshape(beta.shape)

    return _make(out.astype(x.dtype, copy=False), "layernorm", (x, gamma, beta), bw)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = EPS):
    """Per-channel normalization over every non-channel axis.

    Returns ``(out, (new_mean, new_var))`` when training, else ``(out, None)``.
    Running statistics use the biased batch variance.
    """
    d = x.data
    red = tuple(range(d.ndim - 1))
    if training:
        mu = d.mean(axis=red)
        var = d.var(axis=red)
        stats = ((1 - momentum) * running_mean + momentum * mu,
                 (1 - momentum) * running_var + momentum * var)
    else:
        mu = np.asarray(running_mean, dtype=d.dtype)
        var = np.asarray(running_var, dtype=d.dtype)
        stats = None
    inv = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = (d - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        if training:
            gx = inv * (gx_hat - gx_hat.mean(axis=red) - xhat * (gx_hat * xhat).mean(axis=red))
        else:
            gx = gx_hat * inv
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out.astype(d.dtype, copy=False), "batchnorm", (x, gamma, beta), bw), stats


def norm(x: Tensor, kind: str, params: dict, training: bool = False):
    """Dispatch to ``layernorm`` or ``batchnorm``; batchnorm also returns its stats update."""
    if kind == "layernorm":
        return layernorm(x, params["g"], params["b"])
    if kind == "batchnorm":
        return batchnorm(x, params["g"], params["b"], params["running_mean"], params["running_var"], training)
    raise ValueError(f"unknown norm kind {kind!r}")
