"""Residual convolutional classifier for the (weighted) ST-ROI image.

A stem conv feeds three stages of identity-shortcut blocks; stage entries
halve the spatial extent.  The default plan is a small stand-in with the
same block grammar as an 18-layer residual net, sized for CPU training;
the full-scale plan stays available through the config.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DataError, ShapeError, UsageError
from .rng import Rng
from .tensor import BatchNorm, Parameter, Tensor

Float = np.float32


@dataclass
class RgbNetConfig:
    input_side: int = 64
    num_classes: int = 4
    in_channels: int = 3
    stem_channels: int = 16
    stages: tuple = ((16, 2), (32, 2), (64, 2))   # (channels, blocks) per stage
    stage_strides: tuple = (2, 2, 2)

    def __post_init__(self):
        if len(self.stages) != len(self.stage_strides):
            raise UsageError("stages and stage_strides must have equal length")
        side = self.input_side
        for stride in self.stage_strides:
            side //= stride
        if side < 4:
            raise UsageError(f"input side {self.input_side} pools below 4x4")


def _conv_param(rng: Rng, cout: int, cin: int, k: int) -> Parameter:
    return Parameter(tn.fan_in_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k))


class ResidualBlock:
    """conv-bn-relu-conv-bn plus identity (or projected) shortcut, relu."""

    def __init__(self, rng: Rng, in_channels: int, out_channels: int, stride: int):
        self.stride = int(stride)
        self.conv1 = _conv_param(rng, out_channels, in_channels, 3)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = _conv_param(rng, out_channels, out_channels, 3)
        self.bn2 = BatchNorm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.proj = _conv_param(rng, out_channels, in_channels, 1)
            self.proj_bn = BatchNorm(out_channels)
        else:
            self.proj = None
            self.proj_bn = None

    def parameters(self) -> list[Parameter]:
        params = [self.conv1, *self.bn1.parameters(), self.conv2, *self.bn2.parameters()]
        if self.proj is not None:
            params.extend([self.proj, *self.proj_bn.parameters()])
        return params

    def shortcut(self, x: Tensor, training: bool) -> Tensor:
        if self.proj is None:
            return x
        y = tn.conv2d(x, self.proj.value, stride=(self.stride, self.stride), padding=(0, 0))
        return self.proj_bn(y, training)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = tn.conv2d(x, self.conv1.value, stride=(self.stride, self.stride), padding=(1, 1))
        y = tn.relu(self.bn1(y, training))
        y = tn.conv2d(y, self.conv2.value, stride=(1, 1), padding=(1, 1))
        y = self.bn2(y, training)
        sc = self.shortcut(x, training)
        if y.shape != sc.shape:
            raise ShapeError("residual_block", y.shape, sc.shape)
        return tn.relu(tn.add(y, sc))


def residual_block_forward(x: Tensor, block: ResidualBlock,
                           training: bool = False) -> Tensor:
    return block.forward(x, training)


class RgbNet:
    def __init__(self, config: RgbNetConfig, rng: Rng):
        self.config = config
        self.stem = _conv_param(rng, config.stem_channels, config.in_channels, 3)
        self.stem_bn = BatchNorm(config.stem_channels)
        self.blocks: list[ResidualBlock] = []
        cin = config.stem_channels
        for (cout, count), stride in zip(config.stages, config.stage_strides):
            for b in range(count):
                self.blocks.append(ResidualBlock(rng, cin, cout, stride if b == 0 else 1))
                cin = cout
        self.head_w = Parameter(tn.fan_in_uniform(rng, (cin, config.num_classes), fan_in=cin))
        self.head_b = Parameter(np.zeros(config.num_classes, dtype=Float))

    def parameters(self) -> list[Parameter]:
        params = [self.stem, *self.stem_bn.parameters()]
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend([self.head_w, self.head_b])
        return params

    def forward(self, x: Tensor, training: bool = False):
        s = self.config.input_side
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels \
                or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError("rgb_net", x.shape,
                             (-1, self.config.in_channels, s, s))
        y = tn.conv2d(x, self.stem.value, stride=(1, 1), padding=(1, 1))
        y = tn.relu(self.stem_bn(y, training))
        for block in self.blocks:
            y = block.forward(y, training)
        pooled = tn.reduce_mean(y, axes=(2, 3))
        logits = tn.add_rowvec(tn.matmul(pooled, self.head_w.value), self.head_b.value)
        return logits, tn.softmax(logits)

    # -- checkpoint plumbing

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"stem.w": self.stem.data,
               "stem.bn.gamma": self.stem_bn.gamma.data,
               "stem.bn.beta": self.stem_bn.beta.data,
               "stem.bn.running_mean": self.stem_bn.running_mean,
               "stem.bn.running_var": self.stem_bn.running_var}
        for i, block in enumerate(self.blocks):
            p = f"block{i}"
            out[f"{p}.conv1"] = block.conv1.data
            out[f"{p}.conv2"] = block.conv2.data
            for tag, bn in (("bn1", block.bn1), ("bn2", block.bn2)):
                out[f"{p}.{tag}.gamma"] = bn.gamma.data
                out[f"{p}.{tag}.beta"] = bn.beta.data
                out[f"{p}.{tag}.running_mean"] = bn.running_mean
                out[f"{p}.{tag}.running_var"] = bn.running_var
            if block.proj is not None:
                out[f"{p}.proj"] = block.proj.data
                out[f"{p}.proj_bn.gamma"] = block.proj_bn.gamma.data
                out[f"{p}.proj_bn.beta"] = block.proj_bn.beta.data
                out[f"{p}.proj_bn.running_mean"] = block.proj_bn.running_mean
                out[f"{p}.proj_bn.running_var"] = block.proj_bn.running_var
        out["head.w"] = self.head_w.data
        out["head.b"] = self.head_b.data
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.state_tensors()
        missing = set(own) - set(tensors)
        if missing:
            raise DataError(f"checkpoint is missing tensors: {sorted(missing)}")
        for name, dst in own.items():
            src = np.asarray(tensors[name], dtype=Float)
            if src.shape != dst.shape:
                raise ShapeError(f"load {name}", src.shape, dst.shape)
            dst[...] = src


def rgb_classify(x: Tensor, net: RgbNet, training: bool = False):
    """Stem, stages, global pooling, linear head and softmax."""
    return net.forward(x, training)


def paper_scale_config(num_classes: int) -> RgbNetConfig:
    """The full-size preset: 18 conv layers at 225x225 input."""
    return RgbNetConfig(input_side=225, num_classes=num_classes, stem_channels=64,
                        stages=((64, 2), (128, 2), (256, 2), (512, 2)),
                        stage_strides=(1, 2, 2, 2))
