"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is deliberately small: a handful of primitives sufficient for
convolutional supernets (convolution with stride/dilation/groups, batch
norm, pooling, concat, softmax, cross-entropy) plus a tape that records
primitive applications in execution order. Backward replays the tape in
exact reverse order, accumulating gradients additively across fan-out.

Everything is float64 and deterministic: the same inputs produce
bit-identical outputs and gradients on every run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "UnknownPrimitiveError",
    "NumericError",
    "GradCheckError",
    "GradCheckReport",
    "grad_check",
    "assert_finite",
    "forward_primitive",
    "register_primitive",
    "primitive_names",
    "relu",
    "conv2d",
    "batch_norm",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "concat",
    "add",
    "mul",
    "scale",
    "crop_offset",
    "channel_shuffle",
    "weighted_sum",
    "linear",
    "softmax",
    "cross_entropy_logits",
    "tensor_sum",
]


class ShapeError(ValueError):
    """A primitive was applied to inputs violating its shape contract."""

    def __init__(self, primitive: str, message: str):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


class UnknownPrimitiveError(ValueError):
    """forward_primitive was asked for an id that is not registered."""


class NumericError(FloatingPointError):
    """A tensor that must be finite contained NaN or Inf."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``grad`` stays ``None`` until backward accumulates into it; it is only
    ever populated for tensors with ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """A named leaf tensor that optimizers update."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.shape})"


# One entry per primitive application: (output, inputs, backward rule).
# The backward rule maps the output gradient to one gradient per input,
# aligned positionally; ``None`` marks inputs that need no gradient.
_BackwardFn = Callable[[np.ndarray], tuple]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, which for an eager engine is
    a valid topological order; ``backward`` walks them in exact reverse.
    Use as a context manager around the forward pass:

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], _BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must nest"

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every tensor that
        requires a gradient and is reachable from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
        if not self._entries:
            raise RuntimeError("backward called on an empty tape")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, inputs, bwd in reversed(self._entries):
            gout = out.grad
            if gout is None:
                continue
            grads = bwd(gout)
            for inp, gin in zip(inputs, grads):
                if gin is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gin

    def clear(self) -> None:
        self._entries.clear()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd: _BackwardFn) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._entries.append((out, inputs, bwd))
    return out


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def assert_finite(t: Tensor, context: str = "tensor") -> None:
    """Raise NumericError if ``t`` contains NaN or Inf."""
    if not np.isfinite(t.data).all():
        bad = int(np.size(t.data) - np.isfinite(t.data).sum())
        raise NumericError(f"{context}: {bad} non-finite value(s), shape {t.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    mask = x.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _record(out, (x,), bwd)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, tuple):
        return v
    return (int(v), int(v))


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation, no bias.

    x: (B, C_in, H, W); weight: (C_out, C_in/groups, kh, kw).
    Output spatial size follows the usual floor formula.
    """
    if x.ndim != 4:
        raise ShapeError("conv2d", f"input must be 4-D (B,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError("conv2d", f"weight must be 4-D, got {weight.shape}")
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if C % groups or Cout % groups:
        raise ShapeError("conv2d", f"channels ({C}->{Cout}) not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError("conv2d", f"weight expects {Cg * groups} input channels, input has {C}")
    ph, pw = _pair(padding)
    KH = (kh - 1) * dilation + 1
    KW = (kw - 1) * dilation + 1
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < KH or Wp < KW:
        raise ShapeError("conv2d", f"kernel {KH}x{KW} exceeds padded input {Hp}x{Wp}")
    OH = (Hp - KH) // stride + 1
    OW = (Wp - KW) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # (B, C, OH, OW, kh, kw) view; dilation realized by subsampling the window
    v = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::stride, ::stride, ::dilation, ::dilation]
    wd = weight.data
    depthwise = groups == C and Cg == 1 and Cout == C
    if depthwise:
        out_data = np.einsum("bchwij,cij->bchw", v, wd[:, 0], optimize=True)
    else:
        out_data = np.empty((B, Cout, OH, OW))
        Og = Cout // groups
        for gi in range(groups):
            cs = slice(gi * Cg, (gi + 1) * Cg)
            os_ = slice(gi * Og, (gi + 1) * Og)
            out_data[:, os_] = np.einsum("bchwij,ocij->bohw", v[:, cs], wd[os_], optimize=True)
    out = Tensor(out_data, requires_grad=_needs_grad(x, weight))

    def bwd(g):
        dw = None
        dx = None
        if weight.requires_grad:
            if depthwise:
                dw = np.einsum("bchwij,bchw->cij", v, g, optimize=True)[:, None]
            else:
                dw = np.empty_like(wd)
                Og = Cout // groups
                for gi in range(groups):
                    cs = slice(gi * Cg, (gi + 1) * Cg)
                    os_ = slice(gi * Og, (gi + 1) * Og)
                    dw[os_] = np.einsum("bchwij,bohw->ocij", v[:, cs], g[:, os_], optimize=True)
        if x.requires_grad:
            dxp = np.zeros((B, C, Hp, Wp))
            Og = Cout // groups
            for i in range(kh):
                for j in range(kw):
                    hi = slice(i * dilation, i * dilation + stride * OH, stride)
                    wj = slice(j * dilation, j * dilation + stride * OW, stride)
                    if depthwise:
                        dxp[:, :, hi, wj] += g * wd[None, :, 0, i, j, None, None]
                    else:
                        for gi in range(groups):
                            cs = slice(gi * Cg, (gi + 1) * Cg)
                            os_ = slice(gi * Og, (gi + 1) * Og)
                            dxp[:, cs, hi, wj] += np.einsum(
                                "bohw,oc->bchw", g[:, os_], wd[os_, :, i, j], optimize=True
                            )
            dx = dxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else dxp
        return (dx, dw)

    return _record(out, (x, weight), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch normalization with per-batch statistics (no running averages).

    Statistics are taken per channel over the batch and spatial axes.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm", f"input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batch_norm", f"gamma/beta must have shape ({C},)")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gam = gamma.data[None, :, None, None]
    out = Tensor(gam * xhat + beta.data[None, :, None, None], requires_grad=_needs_grad(x, gamma, beta))

    def bwd(g):
        dgamma = np.einsum("bchw,bchw->c", g, xhat) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gm = g.mean(axis=(0, 2, 3), keepdims=True)
            gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = gam * inv * (g - gm - xhat * gxm)
        return (dx, dgamma, dbeta)

    return _record(out, (x, gamma, beta), bwd)


def _pool_prep(name: str, x: Tensor, kernel: int, stride: int, padding: int, pad_value: float):
    if x.ndim != 4:
        raise ShapeError(name, f"input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kernel or Wp < kernel:
        raise ShapeError(name, f"kernel {kernel} exceeds padded input {Hp}x{Wp}")
    OH = (Hp - kernel) // stride + 1
    OW = (Wp - kernel) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=pad_value)
    else:
        xp = x.data
    v = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return B, C, H, W, Hp, Wp, OH, OW, v


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    B, C, H, W, Hp, Wp, OH, OW, v = _pool_prep("max_pool2d", x, kernel, stride, padding, -np.inf)
    flat = v.reshape(B, C, OH, OW, kernel * kernel)
    idx = flat.argmax(axis=-1)  # first max wins on ties, deterministic
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], requires_grad=x.requires_grad)

    def bwd(g):
        dxp = np.zeros((B, C, Hp, Wp))
        for p in range(kernel * kernel):
            i, j = divmod(p, kernel)
            contrib = g * (idx == p)
            dxp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += contrib
        if padding:
            return (dxp[:, :, padding : padding + H, padding : padding + W],)
        return (dxp,)

    return _record(out, (x,), bwd)


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    # padding contributes zeros and is included in the divisor
    B, C, H, W, Hp, Wp, OH, OW, v = _pool_prep("avg_pool2d", x, kernel, stride, padding, 0.0)
    out = Tensor(v.mean(axis=(-2, -1)), requires_grad=x.requires_grad)
    inv_k2 = 1.0 / (kernel * kernel)

    def bwd(g):
        dxp = np.zeros((B, C, Hp, Wp))
        gk = g * inv_k2
        for p in range(kernel * kernel):
            i, j = divmod(p, kernel)
            dxp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += gk
        if padding:
            return (dxp[:, :, padding : padding + H, padding : padding + W],)
        return (dxp,)

    return _record(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", f"input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), requires_grad=x.requires_grad)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)).copy(),)

    return _record(out, (x,), bwd)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat", "needs at least one input")
    base = list(xs[0].shape)
    for t in xs[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError("concat", f"incompatible shapes {xs[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis), requires_grad=_needs_grad(*xs))
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(xs), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))

    def bwd(g):
        return (g, g)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", f"shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, requires_grad=_needs_grad(a, b))

    def bwd(g):
        da = g * b.data if a.requires_grad else None
        db = g * a.data if b.requires_grad else None
        return (da, db)

    return _record(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c, requires_grad=x.requires_grad)

    def bwd(g):
        return (g * c,)

    return _record(out, (x,), bwd)


def crop_offset(x: Tensor, dh: int, dw: int) -> Tensor:
    """Drop the first dh rows and dw columns: x[:, :, dh:, dw:]."""
    if x.ndim != 4:
        raise ShapeError("crop_offset", f"input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if dh >= H or dw >= W:
        raise ShapeError("crop_offset", f"offset ({dh},{dw}) exceeds spatial dims ({H},{W})")
    out = Tensor(x.data[:, :, dh:, dw:].copy(), requires_grad=x.requires_grad)

    def bwd(g):
        return (np.pad(g, ((0, 0), (0, 0), (dh, 0), (dw, 0))),)

    return _record(out, (x,), bwd)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: with groups=2, [a,b,c,d] -> [a,c,b,d]."""
    if x.ndim != 4:
        raise ShapeError("channel_shuffle", f"input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if C % groups:
        raise ShapeError("channel_shuffle", f"channels {C} not divisible by groups {groups}")
    per = C // groups
    out_data = x.data.reshape(B, groups, per, H, W).swapaxes(1, 2).reshape(B, C, H, W)
    out = Tensor(out_data, requires_grad=x.requires_grad)

    def bwd(g):
        # inverse permutation: shuffle with the complementary group count
        return (g.reshape(B, per, groups, H, W).swapaxes(1, 2).reshape(B, C, H, W),)

    return _record(out, (x,), bwd)


def weighted_sum(weights: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """sum_i weights[i] * xs[i] with a 1-D weight vector."""
    if weights.ndim != 1 or weights.shape[0] != len(xs):
        raise ShapeError("weighted_sum", f"need {len(xs)} weights, got shape {weights.shape}")
    if not xs:
        raise ShapeError("weighted_sum", "needs at least one summand")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError("weighted_sum", f"summand shapes differ: {shape} vs {t.shape}")
    wd = weights.data
    acc = wd[0] * xs[0].data
    for i in range(1, len(xs)):
        acc = acc + wd[i] * xs[i].data
    out = Tensor(acc, requires_grad=_needs_grad(weights, *xs))

    def bwd(g):
        if weights.requires_grad:
            dw = np.array([np.vdot(g, t.data) for t in xs])
        else:
            dw = None
        dxs = tuple(wd[i] * g if xs[i].requires_grad else None for i in range(len(xs)))
        return (dw,) + dxs

    return _record(out, (weights, *xs), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias with x: (B, C_in), weight: (C_out, C_in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear", f"need 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", f"input features {x.shape[1]} != weight features {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear", f"bias must have shape ({weight.shape[0]},)")
    out = Tensor(x.data @ weight.data.T + bias.data, requires_grad=_needs_grad(x, weight, bias))

    def bwd(g):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        db = g.sum(axis=0) if bias.requires_grad else None
        return (dx, dw, db)

    return _record(out, (x, weight, bias), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between logits (B, K) and integer labels (B,)."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_logits", f"logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError("cross_entropy_logits", f"labels must have shape ({B},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ShapeError("cross_entropy_logits", f"labels out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    out = Tensor(-logp[rows, labels].mean(), requires_grad=logits.requires_grad)
    p = np.exp(logp)

    def bwd(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (float(g) * d / B,)

    return _record(out, (logits,), bwd)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), requires_grad=x.requires_grad)

    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., Tensor]] = {}


def register_primitive(name: str, fn: Callable[..., Tensor]) -> None:
    """Register ``fn(inputs, attrs) -> Tensor`` under ``name``.

    Mostly useful for tests that need a deliberately wrong backward rule.
    """
    _REGISTRY[name] = fn


def primitive_names() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def forward_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply a registered primitive by id. Unknown ids raise, as do shape
    violations (via the primitive's own checks)."""
    try:
        fn = _REGISTRY[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}; known: {', '.join(primitive_names())}") from None
    return fn(list(inputs), dict(attrs or {}))


register_primitive("relu", lambda ins, at: relu(ins[0]))
register_primitive("conv2d", lambda ins, at: conv2d(ins[0], ins[1], **at))
register_primitive("batch_norm", lambda ins, at: batch_norm(ins[0], ins[1], ins[2], **at))
register_primitive("max_pool2d", lambda ins, at: max_pool2d(ins[0], **at))
register_primitive("avg_pool2d", lambda ins, at: avg_pool2d(ins[0], **at))
register_primitive("global_avg_pool", lambda ins, at: global_avg_pool(ins[0]))
register_primitive("concat", lambda ins, at: concat(ins, **at))
register_primitive("add", lambda ins, at: add(ins[0], ins[1]))
register_primitive("mul", lambda ins, at: mul(ins[0], ins[1]))
register_primitive("scale", lambda ins, at: scale(ins[0], **at))
register_primitive("crop_offset", lambda ins, at: crop_offset(ins[0], **at))
register_primitive("channel_shuffle", lambda ins, at: channel_shuffle(ins[0], **at))
register_primitive("weighted_sum", lambda ins, at: weighted_sum(ins[0], ins[1:]))
register_primitive("linear", lambda ins, at: linear(ins[0], ins[1], ins[2]))
register_primitive("softmax", lambda ins, at: softmax(ins[0], **at))
register_primitive("cross_entropy_logits", lambda ins, at: cross_entropy_logits(ins[0], **at))
register_primitive("tensor_sum", lambda ins, at: tensor_sum(ins[0]))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckError(RuntimeError):
    """The function under test raised while being finite-differenced."""

    def __init__(self, coordinate, message: str):
        super().__init__(f"at coordinate {coordinate}: {message}")
        self.coordinate = coordinate


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences.

    Relative errors are |analytic - numeric| / max(|analytic|, |numeric|, 1),
    i.e. floored at unit scale so near-zero gradients are compared absolutely.
    """

    passed: bool
    max_rel_err: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    failures: list = field(default_factory=list)

    def __str__(self) -> str:
        if self.passed:
            return f"grad_check passed: max rel err {self.max_rel_err:.3e} <= {self.tol:.1e}"
        lines = [f"grad_check FAILED: max rel err {self.max_rel_err:.3e} > {self.tol:.1e}"]
        for idx, a, n, e in self.failures[:10]:
            lines.append(f"  coord {idx}: analytic {a:.6e} vs numeric {n:.6e} (rel {e:.3e})")
        if len(self.failures) > 10:
            lines.append(f"  ... and {len(self.failures) - 10} more")
        return "\n".join(lines)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Check d f(x) / d x against central finite differences.

    ``f`` must map a Tensor to a scalar Tensor and be evaluated fresh on
    every call (it is invoked 2*size(x) + 1 times).
    """
    x0 = np.asarray(x.data, dtype=np.float64).copy()

    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.data.size != 1:
        raise ShapeError("grad_check", f"f must return a scalar, got shape {y.shape}")
    tape.backward(y)
    analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        try:
            xp = x0.copy()
            xp[idx] += h
            fp = f(Tensor(xp)).item()
            xm = x0.copy()
            xm[idx] -= h
            fm = f(Tensor(xm)).item()
        except Exception as e:
            raise GradCheckError(idx, str(e)) from e
        numeric[idx] = (fp - fm) / (2.0 * h)
        it.iternext()

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    max_err = float(rel.max()) if rel.size else 0.0
    failures = []
    if max_err > tol:
        for idx in zip(*np.nonzero(rel > tol)):
            failures.append((idx, float(analytic[idx]), float(numeric[idx]), float(rel[idx])))
    return GradCheckReport(
        passed=max_err <= tol,
        max_rel_err=max_err,
        tol=tol,
        analytic=analytic,
        numeric=numeric,
        rel_err=rel,
        failures=failures,
    )
