"""Dense tensors with reverse-mode automatic differentiation on a tape.

Everything is backed by numpy arrays (float32 for training, float64 for
verification).  Operations executed while a Tape is active record a backward
closure; Tape.backward replays the closures in reverse execution order and
accumulates gradients additively into every requires_grad tensor.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_TAPE_STACK: list["Tape"] = []

_MAGIC = b"ODT1"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return broadcast_mul(self, other)


class Tape:
    """Execution-ordered record of differentiable operations.

    Usable as a context manager; ops executed inside record themselves here.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, backward_fn) -> None:
        self._entries.append((out, backward_fn))
        self._produced.add(id(out))

    def clear(self) -> None:
        self._entries.clear()
        self._produced.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced under this tape")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._entries):
            if out.grad is not None:
                backward_fn(out.grad)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make_out(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, name: str) -> Tensor:
    _check_finite(data, f"{name} output")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward_fn(out))
    return out


# -- broadcasting helpers ----------------------------------------------------

def _broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...], opname: str) -> tuple[int, ...]:
    out = []
    for da, db in zip(reversed((1,) * max(0, len(sb) - len(sa)) + sa),
                      reversed((1,) * max(0, len(sa) - len(sb)) + sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{opname}: incompatible shapes {sa} vs {sb}")
        out.append(max(da, db))
    return tuple(reversed(out))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# -- elementwise and reduction primitives ------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))
        return fn

    return _make_out(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.shape))
        return fn

    return _make_out(a.data - b.data, (a, b), bwd, "sub")


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "broadcast_mul")
    ad, bd = a.data, b.data

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bd, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * ad, b.shape))
        return fn

    return _make_out(ad * bd, (a, b), bwd, "broadcast_mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    cv = a.data.dtype.type(c)

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g * cv)
        return fn

    return _make_out(a.data * cv, (a,), bwd, "scalar_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g * mask)
        return fn

    return _make_out(np.where(mask, a.data, a.data.dtype.type(0)), (a,), bwd, "relu")


def clamp_min0(a: Tensor) -> Tensor:
    """max(x, 0); alias of relu."""
    return relu(a)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # sign(0) = 0, the chosen subgradient

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g * sign)
        return fn

    return _make_out(np.abs(a.data), (a,), bwd, "abs")


def sum_(a: Tensor) -> Tensor:
    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, np.broadcast_to(g, a.shape).copy())
        return fn

    return _make_out(a.data.sum(), (a,), bwd, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    inv = a.data.dtype.type(1.0 / n)

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, np.broadcast_to(g * inv, a.shape).copy())
        return fn

    return _make_out(a.data.mean(), (a,), bwd, "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g.reshape(old))
        return fn

    return _make_out(a.data.reshape(shape), (a,), bwd, "reshape")


# -- pooling -----------------------------------------------------------------

def global_avg_pool(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D tensor, got {a.shape}")
    B, C, H, W = a.shape
    if H * W < 1:
        raise ShapeError("global_avg_pool on an empty spatial plane")
    inv = a.data.dtype.type(1.0 / (H * W))

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, np.broadcast_to(g * inv, a.shape).copy())
        return fn

    return _make_out(a.data.mean(axis=(2, 3), keepdims=True), (a,), bwd, "global_avg_pool")


def channel_avg_pool(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"channel_avg_pool expects a 4-D tensor, got {a.shape}")
    B, C, H, W = a.shape
    if C < 1:
        raise ShapeError("channel_avg_pool with zero channels")
    inv = a.data.dtype.type(1.0 / C)

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, np.broadcast_to(g * inv, a.shape).copy())
        return fn

    return _make_out(a.data.mean(axis=1, keepdims=True), (a,), bwd, "channel_avg_pool")


def max_pool2d(a: Tensor, kernel: int = 2) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-D tensor, got {a.shape}")
    B, C, H, W = a.shape
    k = kernel
    if H % k or W % k:
        raise ShapeError(f"max_pool2d: spatial dims {H}x{W} not divisible by kernel {k}")
    Ho, Wo = H // k, W // k
    windows = a.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    idx = windows.argmax(axis=-1)  # first max wins ties: deterministic
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                gw = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
                np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
                ga = gw.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
                _accum(a, ga)
        return fn

    return _make_out(out_data, (a,), bwd, "max_pool2d")


# -- convolution and linear ---------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input channels {C} != weight channels {Ci}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({Co},)")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # B,Ci,Ho,Wo,kh,kw
    out_data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out_data = np.ascontiguousarray(out_data)

    def bwd(out):
        def fn(g):
            if w.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # Co,Ci,kh,kw
                _accum(w, gw)
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gcols = np.tensordot(g, w.data, axes=([1], [0]))  # B,Ho,Wo,Ci,kh,kw
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
                _accum(x, gx)
        return fn

    return _make_out(out_data, (x, w) + (() if b is None else (b,)), bwd, "conv2d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight features {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def bwd(out):
        def fn(g):
            if x.requires_grad:
                _accum(x, g @ w.data)
            if w.requires_grad:
                _accum(w, g.T @ x.data)
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=0))
        return fn

    return _make_out(out_data, (x, w) + (() if b is None else (b,)), bwd, "linear")


# -- loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    B, K = logits.shape
    if K < 2:
        raise ShapeError(f"softmax_cross_entropy needs K >= 2 classes, got {K}")
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {lab.shape} != ({B},)")
    if lab.min() < 0 or lab.max() >= K:
        raise IndexError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), lab].mean()

    def bwd(out):
        def fn(g):
            if logits.requires_grad:
                gl = probs.copy()
                gl[np.arange(B), lab] -= 1
                _accum(logits, gl * (g / B))
        return fn

    return _make_out(np.asarray(loss, dtype=logits.dtype), (logits,), bwd, "softmax_cross_entropy")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax along the last axis (inference only)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


# -- per-sample spatial standardization (attention normalization core) --------

def spatial_standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / (std + eps) per sample over the trailing H,W plane.

    std is the population standard deviation.  Gradient flows through mean
    and std (layernorm-style backward).
    """
    if a.data.ndim != 4:
        raise ShapeError(f"spatial_standardize expects a 4-D tensor, got {a.shape}")
    B, C, H, W = a.shape
    n = H * W
    mu = a.data.mean(axis=(2, 3), keepdims=True)
    d = a.data - mu
    var = (d * d).mean(axis=(2, 3), keepdims=True)
    std = np.sqrt(var)
    inv = 1.0 / (std + a.data.dtype.type(eps))
    out_data = d * inv

    def bwd(out):
        def fn(g):
            if a.requires_grad:
                gm = g.mean(axis=(2, 3), keepdims=True)
                gd = (g * d).sum(axis=(2, 3), keepdims=True)
                # d std/dx_i = d_i / (n*std); zero-guard the constant-map case
                safe = np.where(std > 0, std, 1.0)
                ga = inv * (g - gm) - d * (gd * inv * inv / (n * safe)) * (std > 0)
                _accum(a, ga.astype(a.data.dtype, copy=False))
        return fn

    return _make_out(out_data, (a,), bwd, "spatial_standardize")


# -- serialization -------------------------------------------------------------

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Little-endian binary: magic, dtype code, rank, extents (u64), raw data."""
    dt = np.dtype(arr.dtype)
    if dt not in _DTYPE_CODES:
        raise ContractError(f"unsupported dtype {dt}")
    header = _MAGIC + struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).astype(dt.newbyteorder("<")).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor; returns (array, next offset)."""
    if buf[offset:offset + 4] != _MAGIC:
        raise ContractError("bad tensor magic")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_DTYPES:
        raise ContractError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset + 6)
    dt = _CODE_DTYPES[code]
    start = offset + 6 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    end = start + count * dt.itemsize
    if end > len(buf):
        raise ContractError("truncated tensor blob")
    arr = np.frombuffer(buf[start:end], dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
    return arr, end
