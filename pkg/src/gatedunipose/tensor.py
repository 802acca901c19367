"""Dense NCHW tensor engine with reverse-mode gradients.

Every differentiable operation records its parents and a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the graph
in reverse topological order and accumulates into the ``grad`` slot of leaf
tensors that require gradients.

Precision is an engine-wide setting (``"f32"`` by default, ``"f64"`` for
verification); tensors created through the public constructor are cast to it.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .exceptions import InvalidSpecError, ShapeError, UsageError

__all__ = [
    "ConvSpec",
    "Parameter",
    "Tensor",
    "add",
    "add_channel_bias",
    "avg_pool2d",
    "batch_norm",
    "BatchNormState",
    "bilinear_upsample",
    "channel_scale",
    "clip",
    "concat_channels",
    "conv2d",
    "conv2d_backward",
    "conv_transpose2d",
    "count_parameters",
    "format_millions",
    "gelu",
    "get_dtype",
    "get_precision",
    "global_avg_pool",
    "grid_sample_bilinear",
    "hadamard",
    "linear",
    "mse",
    "no_grad",
    "permute",
    "precision",
    "reshape",
    "scale",
    "set_precision",
    "sigmoid",
    "transposed_conv2d",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = "f32"
_grad_enabled = True


def set_precision(name: str) -> None:
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype():
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the engine precision."""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (eval-mode inference, optimizer updates)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=get_dtype(), copy=True)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autograd ------------------------------------------------------
    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self):
        return _sum(self)

    def mean(self):
        return _mean(self)


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``init`` records how the parameter is (re)initialised: ``("fan_in", n)``
    draws from U(-1/sqrt(n), 1/sqrt(n)); ``("const", c)`` fills with ``c``.
    """

    def __init__(self, shape, init=("const", 0.0)):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init

    def reset(self, rng: np.random.Generator) -> None:
        kind, value = self.init
        if kind == "fan_in":
            bound = 1.0 / math.sqrt(value)
            self.data = rng.uniform(-bound, bound, size=self.shape).astype(get_dtype())
        elif kind == "const":
            self.data = np.full(self.shape, value, dtype=get_dtype())
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        self.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# pointwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._from_op(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    y = special.expit(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * y * (1 - y),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    y = (x * cdf).astype(x.dtype, copy=False)
    dydx = (cdf + x * pdf).astype(x.dtype, copy=False)
    return Tensor._from_op(y, (a,), lambda g: (g * dydx,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return Tensor._from_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    original = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {original} to {shape}") from exc
    return Tensor._from_op(y, (a,), lambda g: (g.reshape(original),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,),
                           lambda g: (np.transpose(g, inverse),))


def _sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                           lambda g: (np.broadcast_to(g, shape).copy(),))


def _mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return Tensor._from_op(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                           lambda g: (np.broadcast_to(g / n, shape).copy(),))


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (sample, channel) plane of ``x`` by ``s[n, c]``."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: expected scale {x.shape[:2]}, got {s.shape}")
    xd, sd = x.data, s.data

    def backward(g):
        return g * sd[:, :, None, None], (g * xd).sum(axis=(2, 3))

    return Tensor._from_op(xd * sd[:, :, None, None], (x, s), backward)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias of shape {b.shape} does not match channels of {x.shape}")
    return Tensor._from_op(x.data + b.data[None, :, None, None], (x, b),
                           lambda g: (g, g.sum(axis=(0, 2, 3))))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one operand")
    n, _, h, w = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not agree on N,H,W with {tensors[0].shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,),
                           lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; extents must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    if k == 1:
        return x
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor._from_op(y, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, in], weight [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs out features {wd.shape[0]}")
        y = y + bias.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(y, parents, backward)


def mse(pred: Tensor, target: Tensor, mask=None) -> Tensor:
    """Mean squared error over the channels (axis 1) selected by ``mask``."""
    _same_shape(pred, target, "mse")
    diff = pred.data - target.data
    if mask is None:
        sel = np.ones(diff.shape[1] if diff.ndim > 1 else 1, dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
        if diff.ndim < 2 or sel.shape != (diff.shape[1],):
            raise ShapeError(f"mse: mask of length {sel.size} for shape {diff.shape}")
    if diff.ndim > 1:
        weights = sel.reshape((1, -1) + (1,) * (diff.ndim - 2)).astype(diff.dtype)
        count = int(sel.sum()) * (diff.size // diff.shape[1])
    else:
        weights = diff.dtype.type(1.0)
        count = diff.size
    if count == 0:
        raise ShapeError("mse: mask selects no elements")
    masked = diff * weights
    value = np.asarray((masked * diff).sum() / count, dtype=diff.dtype)

    def backward(g):
        gp = (2.0 / count) * g * masked
        return gp, -gp

    return Tensor._from_op(value, (pred, target), backward)


# ---------------------------------------------------------------------------
# normalisation


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd, gd, bd = x.data, gamma.data, beta.data
    dt = xd.dtype
    if not training:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dt)
        mul = (gd * inv)[None, :, None, None]
        shift = (bd - state.running_mean * gd * inv)[None, :, None, None]
        xhat = (xd - state.running_mean[None, :, None, None].astype(dt)) * inv[None, :, None, None]
        mul, shift = mul.astype(dt), shift.astype(dt)

        def backward_eval(g):
            return g * mul, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._from_op((xd * mul + shift).astype(dt, copy=False), (x, gamma, beta), backward_eval)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + state.eps)).astype(dt)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * gd[None, :, None, None] + bd[None, :, None, None]

    mom = state.momentum
    unbiased = var * (m / max(m - 1, 1))
    state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
    state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        gx = (inv[None, :, None, None] / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return gx, ggamma, gbeta

    return Tensor._from_op(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise InvalidSpecError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution (cross-correlation, no kernel flip)."""

    in_channels: int
    out_channels: int
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise InvalidSpecError(f"channel counts and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise InvalidSpecError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise InvalidSpecError(f"kernel, stride and dilation must be >= 1: {self}")
        if min(self.padding) < 0:
            raise InvalidSpecError(f"padding must be >= 0: {self}")

    @property
    def effective_kernel(self) -> tuple:
        return tuple((k - 1) * d + 1 for k, d in zip(self.kernel, self.dilation))

    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def transposed_weight_shape(self) -> tuple:
        return (self.in_channels, self.out_channels // self.groups) + self.kernel

    def output_hw(self, h: int, w: int) -> tuple:
        out = []
        for n, k, s, p in zip((h, w), self.effective_kernel, self.stride, self.padding):
            if k > n + 2 * p:
                raise InvalidSpecError(
                    f"effective kernel extent {k} exceeds padded input extent {n + 2 * p}")
            out.append((n + 2 * p - k) // s + 1)
        return tuple(out)

    def transposed_output_hw(self, h: int, w: int) -> tuple:
        out = []
        for n, k, s, p in zip((h, w), self.effective_kernel, self.stride, self.padding):
            extent = (n - 1) * s - 2 * p + k
            if extent < 1:
                raise InvalidSpecError(f"transposed convolution yields empty output ({extent})")
            out.append(extent)
        return tuple(out)


def _tap_slice(i, d, s, n_out):
    start = i * d
    return slice(start, start + s * (n_out - 1) + 1, s)


def _weight_taps(w: np.ndarray, g: int, og: int, cg: int, kh: int, kw: int) -> np.ndarray:
    """[kh, kw, g, og, cg] copy so each tap is contiguous; strided operands push matmul off BLAS."""
    return np.ascontiguousarray(w.reshape(g, og, cg, kh, kw).transpose(3, 4, 0, 1, 2))


def _conv_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n, c, h, wd = x.shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = spec.kernel, spec.stride, spec.padding, spec.dilation
    ho, wo = spec.output_hw(h, wd)
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    if kh == kw == 1 and ph == pw == 0 and sh == sw == 1 and g == 1:
        return np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd)).reshape(n, -1, ho, wo)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
    wk = _weight_taps(w, g, og, cg, kh, kw)
    out = np.zeros((n, g, og, ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        rows = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            xs = xg[:, :, :, rows, _tap_slice(j, dw, sw, wo)]
            wt = wk[i, j]
            if cg == 1 and og == 1:
                out[:, :, 0] += xs[:, :, 0] * wt[None, :, 0, 0, None, None]
            elif g == 1:
                out[:, 0] += np.matmul(wt[0], xs[:, 0].reshape(n, cg, ho * wo)).reshape(n, og, ho, wo)
            else:
                out += np.einsum("gok,ngkhw->ngohw", wt, xs, optimize=True)
    return out.reshape(n, spec.out_channels, ho, wo)


def _conv_grad_input(gout: np.ndarray, w: np.ndarray, spec: ConvSpec, x_shape) -> np.ndarray:
    n, c, h, wd = x_shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = spec.kernel, spec.stride, spec.padding, spec.dilation
    ho, wo = gout.shape[2], gout.shape[3]
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    if kh == kw == 1 and ph == pw == 0 and sh == sw == 1 and g == 1:
        return np.matmul(w[:, :, 0, 0].T, gout.reshape(n, -1, ho * wo)).reshape(x_shape)
    gx = np.zeros((n, g, cg, h + 2 * ph, wd + 2 * pw), dtype=np.result_type(gout, w))
    go = gout.reshape(n, g, og, ho, wo)
    wk = _weight_taps(w, g, og, cg, kh, kw)
    for i in range(kh):
        rows = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            cols = _tap_slice(j, dw, sw, wo)
            wt = wk[i, j]
            if cg == 1 and og == 1:
                gx[:, :, 0, rows, cols] += go[:, :, 0] * wt[None, :, 0, 0, None, None]
            elif g == 1:
                gx[:, 0, :, rows, cols] += np.matmul(
                    wt[0].T, go[:, 0].reshape(n, og, ho * wo)).reshape(n, cg, ho, wo)
            else:
                gx[:, :, :, rows, cols] += np.einsum("gok,ngohw->ngkhw", wt, go, optimize=True)
    gx = gx.reshape(n, c, h + 2 * ph, wd + 2 * pw)
    return gx[:, :, ph:ph + h, pw:pw + wd]


def _conv_grad_weight(x: np.ndarray, gout: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n, c, h, wd = x.shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = spec.kernel, spec.stride, spec.padding, spec.dilation
    ho, wo = gout.shape[2], gout.shape[3]
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    if kh == kw == 1 and ph == pw == 0 and sh == sw == 1 and g == 1:
        gw = np.einsum("nop,ncp->oc", gout.reshape(n, -1, ho * wo), x.reshape(n, c, h * wd), optimize=True)
        return gw[:, :, None, None]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
    go = gout.reshape(n, g, og, ho, wo)
    gw = np.zeros((g, og, cg, kh, kw), dtype=np.result_type(x, gout))
    for i in range(kh):
        rows = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            xs = xg[:, :, :, rows, _tap_slice(j, dw, sw, wo)]
            if cg == 1 and og == 1:
                gw[:, 0, 0, i, j] = (go[:, :, 0] * xs[:, :, 0]).sum(axis=(0, 2, 3))
            elif g == 1:
                xm = xs[:, 0].reshape(n, cg, ho * wo)
                gw[0, :, :, i, j] = np.matmul(go[:, 0].reshape(n, og, ho * wo), xm.transpose(0, 2, 1)).sum(axis=0)
            else:
                gw[:, :, :, i, j] = np.einsum("ngohw,ngkhw->gok", go, xs, optimize=True)
    return gw.reshape(spec.weight_shape())


def _check_conv_operands(x: Tensor, weight: Tensor, spec: ConvSpec, expected_w, in_axis_name):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, {in_axis_name} expects {spec.in_channels}")
    if weight.shape != expected_w:
        raise ShapeError(f"weight shape {weight.shape} != expected {expected_w}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of an NCHW input with ``weight`` [out, in/groups, kh, kw]."""
    _check_conv_operands(x, weight, spec, spec.weight_shape(), "conv spec")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    xd, wd = x.data, weight.data
    y = _conv_forward(xd, wd, spec)
    if bias is not None:
        y += bias.data[None, :, None, None]
    saved = {"x": xd, "w": wd, "spec": spec}

    def backward(g):
        gx, gw, gb = conv2d_backward(g, saved)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(y, parents, backward)


def conv2d_backward(grad_out, saved):
    """Gradients of conv2d w.r.t. (input, weight, bias) given the saved forward context."""
    if not saved or any(key not in saved for key in ("x", "w", "spec")):
        raise UsageError("conv2d_backward needs the saved forward context (x, w, spec)")
    g = grad_out.data if isinstance(grad_out, Tensor) else np.asarray(grad_out)
    x, w, spec = saved["x"], saved["w"], saved["spec"]
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    expected = (x.shape[0], spec.out_channels) + spec.output_hw(x.shape[2], x.shape[3])
    if g.shape != expected:
        raise ShapeError(f"grad_out shape {g.shape} != forward output shape {expected}")
    return (_conv_grad_input(g, w, spec, x.shape),
            _conv_grad_weight(x, g, spec),
            g.sum(axis=(0, 2, 3)))


def transposed_conv2d(x: Tensor, weight: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution; ``weight`` has shape [in, out/groups, kh, kw].

    This is exactly the adjoint of ``conv2d`` with the roles of the channel
    counts exchanged, so forward = conv input-gradient and vice versa.
    """
    _check_conv_operands(x, weight, spec, spec.transposed_weight_shape(), "transposed conv spec")
    n = x.shape[0]
    ho, wo = spec.transposed_output_hw(x.shape[2], x.shape[3])
    adj = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.stride,
                   spec.padding, spec.dilation, spec.groups, False)
    out_shape = (n, spec.out_channels, ho, wo)
    if adj.output_hw(ho, wo) != x.shape[2:]:
        raise InvalidSpecError("transposed convolution geometry is not invertible")
    xd, wd = x.data, weight.data
    y = _conv_grad_input(xd, wd, adj, out_shape)
    if bias is not None:
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
        y = y + bias.data[None, :, None, None]

    def backward(g):
        grads = [_conv_forward(g, wd, adj), _conv_grad_weight(g, xd, adj)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(np.ascontiguousarray(y), parents, backward)


conv_transpose2d = transposed_conv2d


# ---------------------------------------------------------------------------
# resampling


def grid_sample_bilinear(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling at absolute pixel positions.

    ``coords`` is [N, 2, Ho, Wo] holding (x, y) in input pixel units. Positions
    outside [0, W-1] x [0, H-1] are clamped to the border, and the gradient
    with respect to a clamped coordinate is zero.
    """
    if x.ndim != 4:
        raise ShapeError(f"grid_sample_bilinear expects NCHW input, got {x.shape}")
    if coords.ndim != 4 or coords.shape[1] != 2 or coords.shape[0] != x.shape[0]:
        raise ShapeError(f"coords must be [N, 2, Ho, Wo] with N={x.shape[0]}, got {coords.shape}")
    n, c, h, w = x.shape
    ho, wo = coords.shape[2], coords.shape[3]
    xd = x.data
    px = coords.data[:, 0].reshape(n, -1)
    py = coords.data[:, 1].reshape(n, -1)
    inside_x = (px >= 0) & (px <= w - 1)
    inside_y = (py >= 0) & (py <= h - 1)
    # NaN positions cannot index; gather at the origin and poison the output instead
    undefined = np.isnan(px) | np.isnan(py)
    cx = np.where(undefined, 0, np.clip(px, 0, w - 1))
    cy = np.where(undefined, 0, np.clip(py, 0, h - 1))
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0).astype(xd.dtype)[:, None, :]
    fy = (cy - y0).astype(xd.dtype)[:, None, :]

    flat = xd.reshape(n, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx)[:, None, :]
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, idx.shape[2])), axis=2)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    top = v00 + (v01 - v00) * fx
    bottom = v10 + (v11 - v10) * fx
    out = top + (bottom - top) * fy
    if undefined.any():
        out = np.where(undefined[:, None, :], np.nan, out).astype(xd.dtype, copy=False)

    def backward(g):
        g = g.reshape(n, c, -1)
        gx_in = np.zeros(n * c * h * w, dtype=g.dtype)
        base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None] * (h * w)
        for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                           (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
            idx = base + (yy * w + xx)[:, None, :]
            gx_in += np.bincount(idx.ravel(), weights=(g * wt).ravel(), minlength=gx_in.size).astype(g.dtype)
        dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
        dy = bottom - top
        gcx = (g * dx).sum(axis=1) * inside_x
        gcy = (g * dy).sum(axis=1) * inside_y
        gcoords = np.stack([gcx.reshape(n, ho, wo), gcy.reshape(n, ho, wo)], axis=1)
        return gx_in.reshape(n, c, h, w), gcoords

    return Tensor._from_op(out.reshape(n, c, ho, wo), (x, coords), backward)


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """[n_in * factor, n_in] bilinear weights, half-pixel aligned, edge-clamped."""
    n_out = n_in * factor
    pos = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Fixed separable bilinear upsampling by an integer factor."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects NCHW, got {x.shape}")
    if factor == 1:
        return x
    _, _, h, w = x.shape
    ah = _interp_matrix(h, factor, x.dtype)
    aw = _interp_matrix(w, factor, x.dtype)
    y = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)
    return Tensor._from_op(y, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),))


# ---------------------------------------------------------------------------
# accounting


def count_parameters(parameters: Iterable) -> int:
    """Total scalar count; accepts tensors or (name, tensor) pairs."""
    total = 0
    for p in parameters:
        if isinstance(p, tuple):
            p = p[1]
        total += int(np.prod(p.shape))
    return total


def format_millions(count: int) -> str:
    return f"{count / 1e6:.1f}"
