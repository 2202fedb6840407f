"""Parameterized building blocks: residual backbone, attention routing,
semantic aggregation and prediction heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .tensor import ConfigurationError, Parameter, Tensor, add, check_finite, mul, relu, sigmoid, take_channels

SE_RATIO = 4
DROP_RATE = 0.5
ASPP_RATES = (1, 6, 12, 18)


def skip_stage(level: int) -> int:
    """Backbone stage (1-based) fused by aggregation at tree level ``level``."""
    return min(max(5 - level, 1), 4)


class Block:
    """Owns a flat dict of named parameters and non-trainable buffers."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: dict = {}
        self.buffers: dict = {}

    def _name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def add_param(self, name: str, value: np.ndarray, decay_exempt: bool = False) -> Parameter:
        p = Parameter(self._name(name), value, decay_exempt=decay_exempt)
        self.params[p.name] = p
        return p

    def kaiming(self, name: str, shape: tuple, rng: np.random.Generator) -> Parameter:
        fan_in = int(np.prod(shape[1:]))
        return self.add_param(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    def zeros(self, name: str, shape: tuple, decay_exempt: bool = True) -> Parameter:
        return self.add_param(name, np.zeros(shape), decay_exempt=decay_exempt)

    def adopt(self, child: "Block") -> "Block":
        self.params.update(child.params)
        self.buffers.update(child.buffers)
        return child


class BatchNorm(Block):
    def __init__(self, prefix: str, channels: int):
        super().__init__(prefix)
        self.gamma = self.add_param("gamma", np.ones(channels), decay_exempt=True)
        self.beta = self.zeros("beta", (channels,))
        self.buffers[self._name("running_mean")] = np.zeros(channels, dtype=np.float64)
        self.buffers[self._name("running_var")] = np.ones(channels, dtype=np.float64)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta,
                                self.buffers[self._name("running_mean")],
                                self.buffers[self._name("running_var")], train)


class SqueezeExcite(Block):
    def __init__(self, prefix: str, channels: int, rng: np.random.Generator, ratio: int = SE_RATIO):
        super().__init__(prefix)
        hidden = max(channels // ratio, 1)
        self.rw = self.kaiming("reduce.weight", (hidden, channels), rng)
        self.rb = self.zeros("reduce.bias", (hidden,))
        self.ew = self.kaiming("expand.weight", (channels, hidden), rng)
        self.eb = self.zeros("expand.bias", (channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.se_block(x, self.rw, self.rb, self.ew, self.eb)


class Conv(Block):
    def __init__(self, prefix: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 bias: bool = True, zero: bool = False):
        super().__init__(prefix)
        shape = (cout, cin, k, k)
        self.weight = self.zeros("weight", shape, decay_exempt=False) if zero else self.kaiming("weight", shape, rng)
        self.bias = self.zeros("bias", (cout,)) if bias else None

    def __call__(self, x: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=stride, padding=padding, dilation=dilation)


# -- backbone ---------------------------------------------------------------------

class ResidualBlock(Block):
    def __init__(self, prefix: str, cin: int, cout: int, stride: int, dilation: int, rng):
        super().__init__(prefix)
        self.stride, self.dilation = stride, dilation
        self.conv1 = self.adopt(Conv(self._name("conv1"), cin, cout, 3, rng, bias=False))
        self.bn1 = self.adopt(BatchNorm(self._name("bn1"), cout))
        self.conv2 = self.adopt(Conv(self._name("conv2"), cout, cout, 3, rng, bias=False))
        self.bn2 = self.adopt(BatchNorm(self._name("bn2"), cout))
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = self.adopt(Conv(self._name("shortcut"), cin, cout, 1, rng, bias=False))
            self.proj_bn = self.adopt(BatchNorm(self._name("shortcut_bn"), cout))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        d = self.dilation
        h = relu(self.bn1(self.conv1(x, stride=self.stride, padding=d, dilation=d), train))
        h = self.bn2(self.conv2(h, padding=d, dilation=d), train)
        short = x if self.proj is None else self.proj_bn(self.proj(x, stride=self.stride), train)
        return relu(add(h, short))


@dataclass
class BackboneFeatures:
    stages: list      # Res-1..Res-4
    reduced: Tensor   # 1x1-reduced Res-4, input to the root


class Backbone(Block):
    """Four residual stages (strides 2, 4, 8, 8; widths w, 2w, 4w, 4w) plus a 1x1 reduction."""

    def __init__(self, base_width: int, out_width: int, rng: np.random.Generator, blocks_per_stage: int = 2):
        super().__init__("backbone")
        w = base_width
        widths = (w, 2 * w, 4 * w, 4 * w)
        strides = (2, 2, 2, 1)
        dilations = (1, 1, 1, 2)
        self.widths = widths
        self.stages = []
        cin = 3
        for s in range(4):
            blocks = []
            for b in range(blocks_per_stage):
                blk = ResidualBlock(f"backbone.stage{s + 1}.block{b}", cin, widths[s],
                                    strides[s] if b == 0 else 1, dilations[s], rng)
                blocks.append(self.adopt(blk))
                cin = widths[s]
            self.stages.append(blocks)
        self.reduce = self.adopt(Conv("backbone.reduce", widths[3], out_width, 1, rng))

    def __call__(self, image: Tensor, train: bool) -> BackboneFeatures:
        H, W = image.shape[2:]
        if H % 8 or W % 8:
            raise ConfigurationError(f"backbone input dims {(H, W)} must be divisible by 8")
        x = image
        feats = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x, train)
            check_finite(x, f"backbone.stage{s + 1}")
            feats.append(x)
        return BackboneFeatures(feats, relu(self.reduce(x)))


# -- tree blocks ------------------------------------------------------------------

@dataclass
class RoutingOutput:
    mask: Tensor     # (N, I, h, w) post-softmax
    guided: list     # one tensor per child


class RoutingBlock(Block):
    """conv1x1 -> SE -> dropout -> conv1x1 -> softmax; children get parent * mask[c]."""

    def __init__(self, node_id: str, width: int, num_channels: int, rng: np.random.Generator):
        super().__init__(f"{node_id}.routing")
        self.num_channels = num_channels
        self.conv1 = self.adopt(Conv(self._name("conv1"), width, width, 1, rng))
        self.se = self.adopt(SqueezeExcite(self._name("se"), width, rng))
        # zero-init so routing starts uniform
        self.mask_conv = self.adopt(Conv(self._name("mask_conv"), width, num_channels, 1, rng, zero=True))

    def __call__(self, parent: Tensor, train: bool, rng: Optional[np.random.Generator]) -> RoutingOutput:
        h = self.se(relu(self.conv1(parent)))
        h = ops.dropout(h, DROP_RATE, train, rng)
        mask = ops.softmax_channels(self.mask_conv(h))
        guided = [mul(parent, take_channels(mask, [c])) for c in range(self.num_channels - 1)]
        return RoutingOutput(mask, guided)


class AggregationBlock(Block):
    """ASPP over guided features, channel-halving 1x1 + upsample, plus a projected backbone skip."""

    def __init__(self, leaf_id: str, width: int, skip_channels: int, rng: np.random.Generator,
                 use_skip: bool = True, branch_width: Optional[int] = None):
        super().__init__(f"{leaf_id}.aggregation")
        cb = branch_width or max(width // 2, 1)
        self.branches = []
        for i, r in enumerate(ASPP_RATES):
            k = 1 if r == 1 else 3
            self.branches.append(self.adopt(Conv(self._name(f"aspp.branch{i}"), width, cb, k, rng)))
        self.project = self.adopt(Conv(self._name("aspp.project"), cb * len(ASPP_RATES), 2 * width, 1, rng))
        self.halve = self.adopt(Conv(self._name("halve"), 2 * width, width, 1, rng))
        self.use_skip = use_skip
        if use_skip:
            self.skip = self.adopt(Conv(self._name("skip"), skip_channels, width, 1, rng))

    def __call__(self, guided: Tensor, skip: Tensor) -> Tensor:
        h = ops.aspp(guided, [(b.weight, b.bias) for b in self.branches],
                     (self.project.weight, self.project.bias), ASPP_RATES)
        h = self.halve(relu(h))
        h = ops.upsample_bilinear(h, skip.shape[2], skip.shape[3])
        if self.use_skip:
            h = add(h, self.skip(skip))
        return relu(h)


class PredictionBlock(Block):
    """dconv3x3 -> SE -> BN -> dropout -> dconv3x3, returning logits.

    Each deformable conv gets a sibling zero-initialized 3x3 conv emitting
    18 offsets and 9 modulation logits.
    """

    def __init__(self, prefix: str, cin: int, hidden: int, cout: int, rng: np.random.Generator,
                 deformable: bool = True):
        super().__init__(prefix)
        self.deformable = deformable
        self.conv1 = self.adopt(Conv(self._name("dconv1"), cin, hidden, 3, rng))
        self.se = self.adopt(SqueezeExcite(self._name("se"), hidden, rng))
        self.bn = self.adopt(BatchNorm(self._name("bn"), hidden))
        self.conv2 = self.adopt(Conv(self._name("dconv2"), hidden, cout, 3, rng))
        if deformable:
            self.off1 = self.adopt(Conv(self._name("offset1"), cin, 27, 3, rng, zero=True))
            self.off2 = self.adopt(Conv(self._name("offset2"), hidden, 27, 3, rng, zero=True))

    def _conv(self, x: Tensor, conv: Conv, off: Optional[Conv]) -> Tensor:
        if not self.deformable:
            return conv(x, padding=1)
        o = off(x, padding=1)
        offsets = take_channels(o, range(18))
        modulation = sigmoid(take_channels(o, range(18, 27)))
        return ops.deformable_conv2d(x, conv.weight, conv.bias, offsets, modulation, stride=1, padding=1)

    def __call__(self, x: Tensor, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
        h = relu(self._conv(x, self.conv1, self.off1 if self.deformable else None))
        h = self.bn(self.se(h), train)
        h = ops.dropout(h, DROP_RATE, train, rng)
        return self._conv(h, self.conv2, self.off2 if self.deformable else None)
