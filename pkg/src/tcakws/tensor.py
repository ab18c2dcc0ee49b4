"""Dense tensors with reverse-mode autodiff, sized for a ~65K-parameter model.

Define-by-run: operations executed while a Tape is active record a backward
closure onto it, in creation order (which is already a topological order).
`backward(loss, tape)` walks the tape once in reverse. Storage is float32;
reductions accumulate in float64. Gradient buffers on leaf tensors accumulate
across backward calls until cleared explicitly.
"""
from __future__ import annotations

import struct
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractViolation

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of one forward pass. Use as a context manager."""

    def __init__(self):
        self.ops: list[_Node] = []
        self._outer = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap plain scalars/arrays, matching the peer tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return _wrap(a), _wrap(b)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.ops.append(_Node(out, inputs, backward_fn))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data)

    def bw(g):
        ga = _sum_to_shape(g / b.data, a.shape)
        gb = _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def bw(g):
        return ((a.data > 0.0) * g,)

    return _record(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def bw(g):
        return (g * out.data,)

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bw(g):
        return (g / a.data,)

    return _record(out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))

    def bw(g):
        return (g * (0.5 / out.data),)

    return _record(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)

    def bw(g):
        return (g * (2.0 * a.data),)

    return _record(out, (a,), bw)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient is zero where the floor binds."""
    out = Tensor(np.maximum(a.data, floor))

    def bw(g):
        return ((a.data > floor) * g,)

    return _record(out, (a,), bw)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(out, (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record(out, (a,), bw)


# -- reductions ---------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # accumulate in float64, store back at input precision
    val = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(np.asarray(val).astype(a.data.dtype))
    ax = axis

    def bw(g):
        g2 = g if (ax is None or keepdims) else np.expand_dims(g, ax)
        return (np.ascontiguousarray(np.broadcast_to(g2, a.shape), dtype=a.data.dtype),)

    return _record(out, (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s.astype(a.data.dtype))

    def bw(g):
        dot = (g * out.data).sum(axis=axis, keepdims=True)
        return (out.data * (g - dot),)

    return _record(out, (a,), bw)


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics for the shapes this model uses:
    [..., m, k] @ [k, n] and [..., m, k] @ [..., k, n]."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ContractViolation(
            f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        ga = _sum_to_shape(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _sum_to_shape(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


# -- convolutions ---------------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Temporal convolution, inputs [B,T,Cin], weight [K,Cin,Cout].

    Zero padding of (K-1)/2 on both sides, so the output has ceil(T/stride)
    frames for any odd K.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ContractViolation(f"conv1d expects [B,T,Cin] and [K,Cin,Cout], got {x.shape}, {weight.shape}")
    K, Cin, Cout = weight.shape
    if K % 2 != 1:
        raise ContractViolation(f"conv1d kernel size must be odd, got {K}")
    if x.shape[2] != Cin:
        raise ContractViolation(f"conv1d channel mismatch: input has {x.shape[2]}, weight expects {Cin}")
    if stride < 1:
        raise ContractViolation(f"conv1d stride must be positive, got {stride}")
    B, T, _ = x.shape
    pad = (K - 1) // 2
    To = (T - 1) // stride + 1  # == ceil(T / stride)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    # gather [B, To, K, Cin] patches, flatten to columns for one matmul
    pos = (np.arange(To) * stride)[:, None] + np.arange(K)[None, :]
    cols = xp[:, pos, :].reshape(B, To, K * Cin)
    w2 = weight.data.reshape(K * Cin, Cout)
    y = np.matmul(cols, w2)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y.astype(x.data.dtype, copy=False))

    def bw(g):
        gw = np.tensordot(cols, g, axes=([0, 1], [0, 1])).reshape(K, Cin, Cout)
        gb = g.sum(axis=(0, 1)) if bias is not None else None
        gcols = np.matmul(g, w2.T).reshape(B, To, K, Cin)
        gxp = np.zeros_like(xp)
        for k in range(K):
            stop = k + stride * (To - 1) + 1
            gxp[:, k:stop:stride, :] += gcols[:, :, k, :]
        gx = gxp[:, pad:pad + T, :]
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bw)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel K-tap convolution, stride 1. Inputs [B,T,C], weight [K,C]."""
    if x.ndim != 3 or weight.ndim != 2:
        raise ContractViolation(f"depthwise_conv1d expects [B,T,C] and [K,C], got {x.shape}, {weight.shape}")
    K, C = weight.shape
    if K % 2 != 1:
        raise ContractViolation(f"depthwise kernel size must be odd, got {K}")
    if x.shape[2] != C:
        raise ContractViolation(f"depthwise channel mismatch: input has {x.shape[2]}, weight expects {C}")
    B, T, _ = x.shape
    pad = (K - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    y = np.zeros_like(x.data)
    for k in range(K):
        y += weight.data[k] * xp[:, k:k + T, :]
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def bw(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for k in range(K):
            win = xp[:, k:k + T, :]
            gw[k] = np.sum(g * win, axis=(0, 1), dtype=np.float64).astype(weight.data.dtype)
            gxp[:, k:k + T, :] += g * weight.data[k]
        gx = gxp[:, pad:pad + T, :]
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 1))
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bw)


def separable_conv1d(x: Tensor, depthwise: Tensor, pointwise: Tensor,
                     depthwise_bias: Tensor | None = None,
                     pointwise_bias: Tensor | None = None) -> Tensor:
    """Depthwise K-tap filtering followed by 1x1 channel mixing."""
    if pointwise.shape[0] != depthwise.shape[1]:
        raise ContractViolation(
            f"separable_conv1d channel mismatch: depthwise {depthwise.shape} vs pointwise {pointwise.shape}")
    h = depthwise_conv1d(x, depthwise, depthwise_bias)
    y = matmul(h, pointwise)
    if pointwise_bias is not None:
        y = add(y, pointwise_bias)
    return y


# -- batch normalization ---------------------------------------------------------


class BNStats:
    """Running mean/variance for one BN layer (per channel)."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)

    def copy(self) -> "BNStats":
        s = BNStats(len(self.mean))
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BNStats,
               train: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_stats: bool = True) -> Tensor:
    """Normalize [B,T,C] per channel over (B,T).

    Train mode uses batch statistics and updates the running stats
    (running = (1-momentum)*running + momentum*batch, unbiased variance for
    the running buffer). Eval mode uses the running stats as-is.
    """
    if x.ndim != 3:
        raise ContractViolation(f"batch_norm expects [B,T,C], got {x.shape}")
    B, T, C = x.shape
    if train:
        n = B * T
        if n < 2:
            raise ContractViolation("batch_norm train mode needs at least 2 samples per channel")
        mu = np.mean(x.data, axis=(0, 1), dtype=np.float64)
        var = np.mean((x.data - mu) ** 2, axis=(0, 1), dtype=np.float64)
        if update_stats:
            unbiased = var * n / (n - 1)
            stats.mean = ((1 - momentum) * stats.mean + momentum * mu).astype(np.float32)
            stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(np.float32)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = ((x.data - mu) * inv).astype(x.data.dtype)
        out = Tensor(gamma.data * xhat + beta.data)

        def bw(g):
            dgamma = np.sum(g * xhat, axis=(0, 1), dtype=np.float64).astype(gamma.data.dtype)
            dbeta = np.sum(g, axis=(0, 1), dtype=np.float64).astype(beta.data.dtype)
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=(0, 1), dtype=np.float64)
            m2 = (dxhat * xhat).mean(axis=(0, 1), dtype=np.float64)
            dx = (inv * (dxhat - m1 - xhat * m2)).astype(x.data.dtype)
            return dx, dgamma, dbeta

        return _record(out, (x, gamma, beta), bw)

    inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + eps)).astype(x.data.dtype)
    xhat = (x.data - stats.mean.astype(x.data.dtype)) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def bw_eval(g):
        dgamma = np.sum(g * xhat, axis=(0, 1), dtype=np.float64).astype(gamma.data.dtype)
        dbeta = np.sum(g, axis=(0, 1), dtype=np.float64).astype(beta.data.dtype)
        dx = g * (gamma.data * inv)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bw_eval)


def batch_norm_relu(x: Tensor, gamma: Tensor, beta: Tensor, stats: BNStats,
                    train: bool, **kw) -> Tensor:
    return relu(batch_norm(x, gamma, beta, stats, train, **kw))


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every requires_grad leaf reachable from `loss`.

    Leaf grads accumulate across calls; intermediates are not retained.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.ops):
        raise ContractViolation("loss tensor is not an output recorded on this tape")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.ops):
        g_out = flow.pop(id(node.out), None)
        if g_out is None:
            continue  # branch that does not reach the loss
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=t.data.dtype)
            if t.is_leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            else:
                prev = flow.get(id(t))
                flow[id(t)] = g if prev is None else prev + g


def clear_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- SGD with momentum ------------------------------------------------------------


class OptimizerState:
    """Momentum-SGD state over a named parameter set."""

    def __init__(self, param_names: Iterable[str], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0001):
        if lr <= 0:
            raise ContractViolation(f"lr must be positive, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray | None] = {name: None for name in param_names}


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.

    Updates only the parameters named in `state`. The step is all-or-nothing:
    any missing or non-finite gradient aborts before touching a parameter.
    """
    bad = []
    for name in state.velocity:
        p = params[name]
        if p.grad is None:
            raise ContractViolation(f"sgd_step: gradient missing for {name!r}")
        if not np.all(np.isfinite(p.grad)):
            bad.append(name)
    if bad:
        raise ContractViolation(f"sgd_step: non-finite gradients in {bad}")
    for name in state.velocity:
        p = params[name]
        v = state.velocity[name]
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + p.grad + state.weight_decay * p.data
        state.velocity[name] = v
        p.data = p.data - state.lr * v


# -- checkpoint file ------------------------------------------------------------

_CKPT_MAGIC = b"KWSC"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], version: int = 1) -> None:
    """Write named f32 tensors: magic, u32 version, u32 count, then per tensor
    u16 name length, name, u8 rank, u32 dims, little-endian row-major data."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", version, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ContractViolation(f"tensor name too long: {name!r}")
            arr = np.asarray(arr, dtype="<f4")
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)  # keep 0-d rank intact
            if arr.ndim > 0xFF:
                raise ContractViolation(f"tensor rank too large: {arr.ndim}")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ContractViolation(f"not a checkpoint file (magic {magic!r})")
        version, count = struct.unpack("<II", f.read(8))
        if version != 1:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise ContractViolation(f"checkpoint truncated while reading {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
        return out
