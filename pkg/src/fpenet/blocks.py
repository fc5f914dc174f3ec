"""FPE encoder block and MEU decoder module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .ops import BatchNormState, ConvSpec
from .tensor import Tensor, check_rank4

DILATION_LADDER = (1, 2, 4, 8)


def default_dilations(branches):
    if branches <= len(DILATION_LADDER):
        return tuple(DILATION_LADDER[:branches])
    return tuple(2**i for i in range(branches))


@dataclass(frozen=True)
class FpeConfig:
    in_channels: int
    out_channels: int
    expansion: int = 4
    branches: int = 4
    dilations: tuple = None
    stride: int = 1
    inter_branch_add: bool = True

    def __post_init__(self):
        if self.dilations is None:
            object.__setattr__(self, "dilations", default_dilations(self.branches))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        if self.in_channels < 1 or self.out_channels < 1 or self.expansion < 1:
            raise ConfigError("FPE channel counts and expansion must be positive")
        if self.branches not in (1, 2, 4):
            raise ConfigError(f"branches must be 1, 2 or 4, got {self.branches}")
        if len(self.dilations) != self.branches:
            raise ConfigError(f"{self.branches} branches need {self.branches} dilation rates, got {self.dilations}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilation rates must be positive, got {self.dilations}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ConfigError(f"dilation rates must be strictly increasing, got {self.dilations}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.expanded % self.branches:
            raise ConfigError(
                f"expanded width {self.expanded} is not divisible by {self.branches} branches"
            )

    @property
    def expanded(self):
        return self.expansion * self.in_channels

    @property
    def branch_width(self):
        return self.expanded // self.branches

    @property
    def residual(self):
        return self.stride == 1 and self.in_channels == self.out_channels

    @property
    def cascade(self):
        # a strided branch output cannot be added to the next full-resolution subset
        return self.inter_branch_add and self.stride == 1

    def branch_spec(self, i):
        d = self.dilations[i]
        w = self.branch_width
        return ConvSpec(w, w, kernel=(3, 3), stride=self.stride, dilation=d, padding=d, groups=w)

    def expand_spec(self):
        return ConvSpec(self.in_channels, self.expanded, kernel=(1, 1))

    def project_spec(self):
        return ConvSpec(self.expanded, self.out_channels, kernel=(1, 1))


@dataclass(frozen=True)
class MeuConfig:
    high_channels: int
    low_channels: int
    out_channels: int
    use_channel_attention: bool = True
    use_spatial_attention: bool = True

    def high_spec(self):
        return ConvSpec(self.high_channels, self.out_channels, kernel=(1, 1))

    def low_spec(self):
        return ConvSpec(self.low_channels, self.out_channels, kernel=(1, 1))

    def ca_spec(self):
        return ConvSpec(self.out_channels, self.out_channels, kernel=(1, 1), has_bias=True)

    def sa_spec(self):
        return ConvSpec(1, 1, kernel=(1, 1), has_bias=True)


@dataclass
class ConvLayer:
    """A convolution with optional BN; BN-followed convs carry no bias."""

    spec: ConvSpec
    weight: Tensor
    bias: Tensor = None
    bn: BatchNormState = None

    def __call__(self, x, mode="train", act=False):
        y = ops.conv2d(x, self.weight, self.bias, self.spec)
        if self.bn is not None:
            y = ops.batch_norm(y, self.bn, mode)
        return ops.relu(y) if act else y

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias
        if self.bn is not None:
            yield f"{prefix}.bn.gamma", self.bn.gamma
            yield f"{prefix}.bn.beta", self.bn.beta

    def named_bn(self, prefix):
        if self.bn is not None:
            yield f"{prefix}.bn", self.bn


def make_conv(spec, rng, with_bn, dtype=np.float32):
    kh, kw = spec.kernel
    fan_in = (spec.in_channels // spec.groups) * kh * kw
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape).astype(dtype)
    layer = ConvLayer(spec, Tensor(w, requires_grad=True))
    if with_bn:
        layer.bn = BatchNormState(spec.out_channels, dtype=dtype)
    elif spec.has_bias:
        layer.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
    return layer


@dataclass
class FpeParams:
    expand: ConvLayer
    branches: list
    project: ConvLayer

    def named_layers(self):
        yield "expand", self.expand
        for i, layer in enumerate(self.branches):
            yield f"branch{i}", layer
        yield "project", self.project


def init_fpe(cfg, rng, dtype=np.float32):
    return FpeParams(
        expand=make_conv(cfg.expand_spec(), rng, True, dtype),
        branches=[make_conv(cfg.branch_spec(i), rng, True, dtype) for i in range(cfg.branches)],
        project=make_conv(cfg.project_spec(), rng, True, dtype),
    )


def fpe_forward(x, params, cfg, mode="train"):
    check_rank4(x)
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(f"FPE block expects {cfg.in_channels} channels, got {x.shape[1]}", axis="channels")
    h = params.expand(x, mode, act=True)
    subsets = ops.split_channels(h, cfg.branches) if cfg.branches > 1 else [h]
    outs = []
    prev = None
    for i, (f, layer) in enumerate(zip(subsets, params.branches)):
        inp = ops.add(f, prev) if (cfg.cascade and prev is not None) else f
        prev = layer(inp, mode, act=True)
        outs.append(prev)
    assert all(o.shape == outs[0].shape for o in outs), "branch outputs drifted in shape"
    y = ops.concat_channels(outs) if len(outs) > 1 else outs[0]
    y = params.project(y, mode, act=False)
    if cfg.residual:
        y = ops.add(y, x)
    return y


def fpe_receptive_field(cfg):
    """Per-branch receptive field of the single dilated 3x3 tap set."""
    return [(i, 2 * d + 1) for i, d in enumerate(cfg.dilations)]


@dataclass
class MeuParams:
    high: ConvLayer
    low: ConvLayer
    ca: ConvLayer = None
    sa: ConvLayer = None

    def named_layers(self):
        yield "high", self.high
        yield "low", self.low
        if self.ca is not None:
            yield "ca", self.ca
        if self.sa is not None:
            yield "sa", self.sa


def init_meu(cfg, rng, dtype=np.float32):
    p = MeuParams(
        high=make_conv(cfg.high_spec(), rng, True, dtype),
        low=make_conv(cfg.low_spec(), rng, True, dtype),
    )
    if cfg.use_channel_attention:
        p.ca = make_conv(cfg.ca_spec(), rng, False, dtype)
    if cfg.use_spatial_attention:
        p.sa = make_conv(cfg.sa_spec(), rng, False, dtype)
    return p


def meu_forward(high, low, params, cfg, mode="train"):
    check_rank4(high, "high-level features")
    check_rank4(low, "low-level features")
    if high.shape[1] != cfg.high_channels:
        raise DimensionError(f"MEU high input needs {cfg.high_channels} channels, got {high.shape[1]}", axis="channels")
    if low.shape[1] != cfg.low_channels:
        raise DimensionError(f"MEU low input needs {cfg.low_channels} channels, got {low.shape[1]}", axis="channels")
    if low.shape[0] != high.shape[0]:
        raise DimensionError("MEU inputs differ in batch size", axis="batch")
    if low.shape[2] != 2 * high.shape[2]:
        raise DimensionError(f"MEU low height {low.shape[2]} is not twice high height {high.shape[2]}", axis="height")
    if low.shape[3] != 2 * high.shape[3]:
        raise DimensionError(f"MEU low width {low.shape[3]} is not twice high width {high.shape[3]}", axis="width")

    hp = params.high(high, mode)
    lp = params.low(low, mode)
    if params.ca is not None:
        ca = ops.relu(params.ca(ops.global_avg_pool(hp)))
        lw = ops.mul_broadcast(lp, ca)
    else:
        lw = lp
    up = ops.bilinear_upsample_x2(hp)
    if params.sa is not None:
        sa = ops.relu(params.sa(ops.channel_mean(lp)))
        hw = ops.mul_broadcast(up, sa)
    else:
        hw = up
    return ops.add(lw, hw)
