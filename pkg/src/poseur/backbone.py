"""Strided conv feature pyramid and the pooled coarse proposal head."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError, ContractViolation
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor, as_tensor, relu, sigmoid

B_FLOOR = 1e-6


@dataclass
class BackboneConfig:
    input_size: tuple = (64, 64)
    channels: list = field(default_factory=lambda: [16, 32])
    strides: list = field(default_factory=lambda: [8, 16])
    num_keypoints: int = 8
    embed_dim: int = 32

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.channels = [int(c) for c in self.channels]
        self.strides = [int(s) for s in self.strides]
        if len(self.strides) < 1 or len(self.channels) != len(self.strides):
            raise ConfigurationError("need one channel count per stride and at least one level")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigurationError(f"strides must be strictly increasing, got {self.strides}")
        prev = 1
        for s in self.strides:
            if s % prev:
                raise ConfigurationError(f"stride {s} is not a multiple of the previous stride {prev}")
            prev = s
        H, W = self.input_size
        if H % self.strides[-1] or W % self.strides[-1]:
            raise ConfigurationError(f"input {self.input_size} not divisible by final stride {self.strides[-1]}")
        if self.num_keypoints < 1 or self.embed_dim < 1:
            raise ConfigurationError("num_keypoints and embed_dim must be positive")

    @property
    def num_levels(self):
        return len(self.strides)

    def level_shapes(self):
        H, W = self.input_size
        return [(H // s, W // s) for s in self.strides]


@dataclass
class FeaturePyramid:
    """``levels[l]`` is ``[B, C_l, H_l, W_l]``; ``pooled`` is ``[B, C_last]``."""

    levels: list
    pooled: Tensor

    @property
    def shapes(self):
        return [lv.shape[2:] for lv in self.levels]


@dataclass
class CoarseProposal:
    mu: Tensor  # [B, K, 2] in [0, 1]
    b: Tensor  # [B, K, 2] in (0, 1]


class _Stage(Module):
    def __init__(self, c_in, c_out, ratio, rng):
        if ratio == 1:
            self.down = Conv2d(c_in, c_out, 3, rng, stride=1, padding=1)
        else:
            self.down = Conv2d(c_in, c_out, ratio, rng, stride=ratio)
        self.norm1 = BatchNorm2d(c_out)
        self.conv = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.norm2 = BatchNorm2d(c_out)

    def __call__(self, x):
        x = relu(self.norm1(self.down(x)))
        return relu(self.norm2(self.conv(x)))


class Backbone(Module):
    """Conv-BN-ReLU stack with one stage per pyramid level, plus the coarse head.

    Each stage downsamples with a ``r x r`` stride-``r`` convolution (``r``
    the stride ratio to the previous level) followed by a 3x3 convolution.
    """

    def __init__(self, config: BackboneConfig, rng):
        self.config = config
        stages, c_in, prev = [], 3, 1
        for c, s in zip(config.channels, config.strides):
            stages.append(_Stage(c_in, c, s // prev, rng))
            c_in, prev = c, s
        self.stages = stages
        self.head = Linear(config.channels[-1], 4 * config.num_keypoints, rng)
        self.head.weight.data *= 0.1

    def extract_pyramid(self, image) -> FeaturePyramid:
        x = as_tensor(image)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        H, W = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (H, W):
            raise ContractViolation(f"expected image [3, {H}, {W}], got {image.shape}")
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        pooled = levels[-1].mean(axis=(2, 3))
        return FeaturePyramid(levels, pooled)

    def coarse_proposal(self, pooled) -> CoarseProposal:
        return coarse_proposal(pooled, self.head, self.config.num_keypoints)


def coarse_proposal(pooled, head: Linear, num_keypoints) -> CoarseProposal:
    """Affine map of the pooled feature, squashed by sigmoid into location and scale."""
    pooled = as_tensor(pooled)
    if pooled.ndim == 1:
        pooled = pooled.reshape(1, -1)
    K = num_keypoints
    if head.weight.shape != (pooled.shape[-1], 4 * K):
        raise ContractViolation(f"head weight {head.weight.shape} incompatible with pooled {pooled.shape}")
    out = head(pooled).reshape(pooled.shape[0], 2, K, 2)
    mu = sigmoid(out[:, 0])
    b = sigmoid(out[:, 1]).clip(B_FLOOR, None)
    return CoarseProposal(mu, b)

