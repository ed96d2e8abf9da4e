"""Candidate operations for searched cells, with analytic cost formulas.

Two op families exist. Cells searched over spatial features use the
8-op set NORMAL_OPS (separable/dilated convs, pools, identity, zero);
channel-adapting cells between other cells use the 4-op set
CONNECTION_OPS (a dilated 3x3 conv and grouped 1x1 convs with channel
shuffle).

Cost conventions (normative, mirrored in the README):
  - conv k x k with groups g: params k^2 * c_in * c_out / g (no bias),
    FLOPs (multiply-accumulates) k^2 * (c_in/g) * c_out * h_out * w_out
  - batch norm: 2 * c params, 0 FLOPs
  - pools: 0 params, k^2 * c * h_out * w_out FLOPs
  - identity / zero: 0 params, 0 FLOPs
  - ReLU, channel shuffle, global pooling: uncounted

param_count / flop_count and build() derive from the same per-kind layer
plan, so the formulas match the instantiated weights by construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    avg_pool2d,
    batch_norm,
    channel_shuffle,
    concat,
    conv2d,
    crop_offset,
    max_pool2d,
    relu,
)

__all__ = [
    "NORMAL_OPS",
    "CONNECTION_OPS",
    "ZERO",
    "IDENTITY",
    "OpContext",
    "OpInstance",
    "build",
    "param_count",
    "flop_count",
    "UnknownOpError",
]

SEP_CONV_3 = "sep_conv_3x3"
SEP_CONV_5 = "sep_conv_5x5"
DIL_SEP_CONV_3 = "dil_sep_conv_3x3"
DIL_SEP_CONV_5 = "dil_sep_conv_5x5"
MAX_POOL_3 = "max_pool_3x3"
AVG_POOL_3 = "avg_pool_3x3"
IDENTITY = "identity"
ZERO = "zero"
DIL_CONV_3 = "dil_conv_3x3"
GROUP_CONV_G1 = "group_conv_1x1_g1"
GROUP_CONV_G2 = "group_conv_1x1_g2"
GROUP_CONV_G4 = "group_conv_1x1_g4"

# Order is load-bearing: architecture logits index into these tuples.
NORMAL_OPS: tuple[str, ...] = (
    SEP_CONV_3,
    SEP_CONV_5,
    DIL_SEP_CONV_3,
    DIL_SEP_CONV_5,
    MAX_POOL_3,
    AVG_POOL_3,
    IDENTITY,
    ZERO,
)
CONNECTION_OPS: tuple[str, ...] = (
    DIL_CONV_3,
    GROUP_CONV_G1,
    GROUP_CONV_G2,
    GROUP_CONV_G4,
)


class UnknownOpError(ValueError):
    pass


@dataclass(frozen=True)
class OpContext:
    """Placement of an op: channel counts, incoming spatial size, stride."""

    c_in: int
    c_out: int
    h_in: int
    w_in: int
    stride: int = 1

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1:
            raise ShapeError("OpContext", f"channel counts must be positive, got {self.c_in}->{self.c_out}")
        if self.stride not in (1, 2):
            raise ShapeError("OpContext", f"stride must be 1 or 2, got {self.stride}")
        if self.h_in < 1 or self.w_in < 1:
            raise ShapeError("OpContext", f"spatial dims must be positive, got {self.h_in}x{self.w_in}")
        if self.stride == 2 and (self.h_in % 2 or self.w_in % 2):
            raise ShapeError("OpContext", f"stride 2 requires even spatial dims, got {self.h_in}x{self.w_in}")

    @property
    def h_out(self) -> int:
        return self.h_in // self.stride

    @property
    def w_out(self) -> int:
        return self.w_in // self.stride


class OpInstance:
    """A built operation: parameters plus a forward over batched tensors."""

    __slots__ = ("kind", "context", "parameters", "_forward")

    def __init__(self, kind: str, context: OpContext, parameters: list[Parameter], forward: Callable[[Tensor], Tensor]):
        self.kind = kind
        self.context = context
        self.parameters = parameters
        self._forward = forward

    def __call__(self, x: Tensor) -> Tensor:
        ctx = self.context
        if x.ndim != 4 or x.shape[1:] != (ctx.c_in, ctx.h_in, ctx.w_in):
            raise ShapeError(
                self.kind,
                f"expected input (B, {ctx.c_in}, {ctx.h_in}, {ctx.w_in}), got {x.shape}",
            )
        return self._forward(x)

    def weight_count(self) -> int:
        return sum(p.size for p in self.parameters)

    def __repr__(self) -> str:  # pragma: no cover
        return f"OpInstance({self.kind}, {self.context})"


def _same_pad(k: int, dilation: int = 1) -> int:
    # padding that preserves spatial size at stride 1 for odd k
    return dilation * (k - 1) // 2


# Layer plans: ("conv", c_in, c_out, k, stride, dilation, groups) | ("bn", c).
# ReLU/pool/shuffle layers carry no cost and are omitted here.


def _sep_conv_layers(ctx: OpContext, k: int) -> list[tuple]:
    if ctx.c_in != ctx.c_out:
        raise ShapeError("sep_conv", f"requires c_in == c_out, got {ctx.c_in}->{ctx.c_out}")
    c = ctx.c_in
    return [
        ("conv", c, c, k, ctx.stride, 1, c),  # depthwise, carries the stride
        ("conv", c, c, 1, 1, 1, 1),
        ("bn", c),
        ("conv", c, c, k, 1, 1, c),
        ("conv", c, c, 1, 1, 1, 1),
        ("bn", c),
    ]


def _dil_sep_conv_layers(ctx: OpContext, k: int) -> list[tuple]:
    if ctx.c_in != ctx.c_out:
        raise ShapeError("dil_sep_conv", f"requires c_in == c_out, got {ctx.c_in}->{ctx.c_out}")
    c = ctx.c_in
    return [
        ("conv", c, c, k, ctx.stride, 2, c),  # depthwise with dilation 2
        ("conv", c, c, 1, 1, 1, 1),
        ("bn", c),
    ]


def _dil_conv_layers(ctx: OpContext) -> list[tuple]:
    return [
        ("conv", ctx.c_in, ctx.c_out, 3, ctx.stride, 2, 1),
        ("bn", ctx.c_out),
    ]


def _group_conv_layers(ctx: OpContext, g: int) -> list[tuple]:
    if ctx.c_in % g or ctx.c_out % g:
        raise ShapeError("group_conv_1x1", f"channels {ctx.c_in}->{ctx.c_out} not divisible by groups {g}")
    return [
        ("conv", ctx.c_in, ctx.c_out, 1, ctx.stride, 1, g),
        ("bn", ctx.c_out),
    ]


def _identity_passthrough(ctx: OpContext) -> bool:
    return ctx.stride == 1 and ctx.c_in == ctx.c_out


def _factorized_reduce_layers(ctx: OpContext) -> list[tuple]:
    # two parallel stride-2 1x1 convs each producing half the channels
    if ctx.c_out % 2:
        raise ShapeError("identity", f"channel-changing identity needs even c_out, got {ctx.c_out}")
    half = ctx.c_out // 2
    return [
        ("conv", ctx.c_in, half, 1, 2, 1, 1),
        ("conv", ctx.c_in, half, 1, 2, 1, 1),
        ("bn", ctx.c_out),
    ]


def _layers_for(kind: str, ctx: OpContext) -> list[tuple]:
    if kind == SEP_CONV_3:
        return _sep_conv_layers(ctx, 3)
    if kind == SEP_CONV_5:
        return _sep_conv_layers(ctx, 5)
    if kind == DIL_SEP_CONV_3:
        return _dil_sep_conv_layers(ctx, 3)
    if kind == DIL_SEP_CONV_5:
        return _dil_sep_conv_layers(ctx, 5)
    if kind in (MAX_POOL_3, AVG_POOL_3):
        if ctx.c_in != ctx.c_out:
            raise ShapeError(kind, f"requires c_in == c_out, got {ctx.c_in}->{ctx.c_out}")
        return []
    if kind == IDENTITY:
        if _identity_passthrough(ctx):
            return []
        return _factorized_reduce_layers(ctx)
    if kind == ZERO:
        return []
    if kind == DIL_CONV_3:
        return _dil_conv_layers(ctx)
    if kind == GROUP_CONV_G1:
        return _group_conv_layers(ctx, 1)
    if kind == GROUP_CONV_G2:
        return _group_conv_layers(ctx, 2)
    if kind == GROUP_CONV_G4:
        return _group_conv_layers(ctx, 4)
    raise UnknownOpError(f"unknown op kind {kind!r}")


def param_count(kind: str, ctx: OpContext) -> int:
    """Scalar weights the op contributes under the documented conventions."""
    total = 0
    for layer in _layers_for(kind, ctx):
        if layer[0] == "conv":
            _, c_in, c_out, k, _stride, _dil, g = layer
            total += k * k * c_in * c_out // g
        elif layer[0] == "bn":
            total += 2 * layer[1]
    return total


def flop_count(kind: str, ctx: OpContext) -> int:
    """Multiply-accumulate count at the op's placement."""
    if kind in (MAX_POOL_3, AVG_POOL_3):
        return 9 * ctx.c_in * ctx.h_out * ctx.w_out
    total = 0
    h, w = ctx.h_in, ctx.w_in
    for layer in _layers_for(kind, ctx):
        if layer[0] == "conv":
            _, c_in, c_out, k, stride, _dil, g = layer
            h //= stride
            w //= stride
            total += k * k * (c_in // g) * c_out * h * w
    return total


def _init_conv(rng: np.random.Generator, c_out: int, c_in_per_group: int, k: int, name: str) -> Parameter:
    fan_in = c_in_per_group * k * k
    bound = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=(c_out, c_in_per_group, k, k))
    return Parameter(data, name)


def _build_chain(kind: str, ctx: OpContext, rng: np.random.Generator, prefix: str):
    """Materialize a ReLU -> conv... -> BN chain from the layer plan."""
    layers = _layers_for(kind, ctx)
    params: list[Parameter] = []
    steps: list[tuple] = [("relu",)]
    idx = 0
    for layer in layers:
        if layer[0] == "conv":
            _, c_in, c_out, k, stride, dil, g = layer
            idx += 1
            w = _init_conv(rng, c_out, c_in // g, k, f"{prefix}.conv{idx}.weight")
            params.append(w)
            steps.append(("conv", w, stride, _same_pad(k, dil), dil, g))
            if kind in (GROUP_CONV_G2, GROUP_CONV_G4):
                steps.append(("shuffle", g))
        elif layer[0] == "bn":
            c = layer[1]
            gamma = Parameter(np.ones(c), f"{prefix}.bn{idx}.gamma")
            beta = Parameter(np.zeros(c), f"{prefix}.bn{idx}.beta")
            params.extend([gamma, beta])
            steps.append(("bn", gamma, beta))
            if layer is not layers[-1]:
                steps.append(("relu",))

    def forward(x: Tensor) -> Tensor:
        out = x
        for step in steps:
            if step[0] == "relu":
                out = relu(out)
            elif step[0] == "conv":
                _, w, stride, pad, dil, g = step
                out = conv2d(out, w, stride=stride, padding=pad, dilation=dil, groups=g)
            elif step[0] == "shuffle":
                out = channel_shuffle(out, step[1])
            elif step[0] == "bn":
                out = batch_norm(out, step[1], step[2])
        return out

    return params, forward


def build(kind: str, ctx: OpContext, rng: np.random.Generator, prefix: str = "op") -> OpInstance:
    """Instantiate an op at a placement, drawing weights from ``rng``.

    Weight draws happen in a fixed order so builds are reproducible.
    """
    if kind == ZERO:
        shape = (ctx.c_out, ctx.h_out, ctx.w_out)

        def fwd_zero(x: Tensor) -> Tensor:
            return Tensor(np.zeros((x.shape[0],) + shape))

        return OpInstance(kind, ctx, [], fwd_zero)

    if kind == IDENTITY and _identity_passthrough(ctx):
        return OpInstance(kind, ctx, [], lambda x: x)

    if kind == IDENTITY:
        # factorized reduce: two stride-2 1x1 convs on the even and
        # one-pixel-shifted grids, concatenated, then BN
        layers = _factorized_reduce_layers(ctx)
        half = ctx.c_out // 2
        w1 = _init_conv(rng, half, ctx.c_in, 1, f"{prefix}.fr.conv1.weight")
        w2 = _init_conv(rng, half, ctx.c_in, 1, f"{prefix}.fr.conv2.weight")
        gamma = Parameter(np.ones(ctx.c_out), f"{prefix}.fr.bn.gamma")
        beta = Parameter(np.zeros(ctx.c_out), f"{prefix}.fr.bn.beta")
        del layers

        def fwd_fr(x: Tensor) -> Tensor:
            y = relu(x)
            a = conv2d(y, w1, stride=2)
            b = conv2d(crop_offset(y, 1, 1), w2, stride=2)
            return batch_norm(concat([a, b], axis=1), gamma, beta)

        return OpInstance(kind, ctx, [w1, w2, gamma, beta], fwd_fr)

    if kind == MAX_POOL_3:
        _layers_for(kind, ctx)  # validates channels
        s = ctx.stride
        return OpInstance(kind, ctx, [], lambda x: max_pool2d(x, 3, s, 1))

    if kind == AVG_POOL_3:
        _layers_for(kind, ctx)
        s = ctx.stride
        return OpInstance(kind, ctx, [], lambda x: avg_pool2d(x, 3, s, 1))

    params, forward = _build_chain(kind, ctx, rng, prefix)
    return OpInstance(kind, ctx, params, forward)
