"""Keypoint query decoder: self-attention, deformable cross-attention, FFN, reference refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import EmsdaWeights, emsda, flatten_level
from .backbone import B_FLOOR
from .errors import ConfigurationError
from .likelihood import LaplaceParams
from .nn import LayerNorm, Linear, Module
from .tensor import as_tensor, relu, sigmoid, softmax

REF_EPS = 1e-5


@dataclass
class DecoderConfig:
    num_layers: int = 3
    heads: int = 8
    points: int = 4
    levels: int = 1
    embed_dim: int = 256
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("decoder needs at least one layer")
        if self.points < 1 or self.levels < 1 or self.heads < 1:
            raise ConfigurationError("heads, points and levels must be positive")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.embed_dim


def refine_reference(queries, ref_points, linear):
    """``sigmoid(logit(clamp(p)) + linear(Q))``; zero weights leave ``p`` unchanged."""
    p = as_tensor(ref_points).clip(REF_EPS, 1.0 - REF_EPS)
    logit = p.log() - (1.0 - p).log()
    return sigmoid(logit + linear(queries))


def group_mask(is_noisy):
    """Additive self-attention mask keeping proposal and noisy groups separate."""
    is_noisy = np.asarray(is_noisy, dtype=bool)
    if not is_noisy.any():
        return None
    same = is_noisy[:, None] == is_noisy[None, :]
    return np.where(same, 0.0, -1e30)


class SelfAttention(Module):
    def __init__(self, dim, heads, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x, mask=None):
        B, N, C = x.shape
        M = self.heads
        d = C // M

        def split(t):
            return t.reshape(B, N, M, d).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
        if mask is not None:
            scores = scores + mask
        ctx = softmax(scores, axis=-1) @ v
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(B, N, C))


class DecoderLayer(Module):
    """Post-norm layer: self-attn, EMSDA, FFN (each residual + LayerNorm), then refinement."""

    def __init__(self, config: DecoderConfig, rng):
        C = config.embed_dim
        self.self_attn = SelfAttention(C, config.heads, rng)
        self.norm1 = LayerNorm(C)
        self.cross_attn = EmsdaWeights(C, config.heads, config.levels, config.points, rng)
        self.norm2 = LayerNorm(C)
        self.ffn1 = Linear(C, config.ffn_dim, rng)
        self.ffn2 = Linear(config.ffn_dim, C, rng)
        self.norm3 = LayerNorm(C)
        self.ref_update = Linear(C, 2, rng, zero=True)

    def __call__(self, queries, ref_points, flat_levels, mask=None):
        q = self.norm1(queries + self.self_attn(queries, mask))
        q = self.norm2(q + emsda(q, ref_points, flat_levels, self.cross_attn))
        q = self.norm3(q + self.ffn2(relu(self.ffn1(q))))
        return q, refine_reference(q, ref_points, self.ref_update)


class OutputHead(Module):
    """Absolute location and scale, both sigmoid-squashed."""

    def __init__(self, dim, rng):
        self.proj = Linear(dim, 4, rng)
        self.proj.weight.data *= 0.1

    def __call__(self, queries):
        out = self.proj(queries)
        B, N = queries.shape[:2]
        out = out.reshape(B, N, 2, 2)
        return LaplaceParams(sigmoid(out[:, :, 0]), sigmoid(out[:, :, 1]).clip(B_FLOOR, None))


@dataclass
class DecoderOutput:
    layers: list  # [(queries, ref_points)] per layer
    predictions: list  # LaplaceParams per layer

    @property
    def final(self) -> LaplaceParams:
        return self.predictions[-1]


class QueryDecoder(Module):
    """Stack of decoder layers with a separate output head per layer."""

    def __init__(self, config: DecoderConfig, rng):
        self.config = config
        self.layers = [DecoderLayer(config, rng) for _ in range(config.num_layers)]
        self.heads = [OutputHead(config.embed_dim, rng) for _ in range(config.num_layers)]

    def __call__(self, query_set, levels):
        return decoder_forward(query_set, levels, self)


def decoder_forward(query_set, levels, decoder: QueryDecoder) -> DecoderOutput:
    """Run every layer; ``levels`` are ``[B, C, H, W]`` maps (or flattened pairs)."""
    cfg = decoder.config
    if len(levels) != cfg.levels:
        raise ConfigurationError(f"decoder configured for {cfg.levels} levels, pyramid has {len(levels)}")
    flat = [lv if isinstance(lv, tuple) else flatten_level(lv) for lv in levels]
    for values, _ in flat:
        if values.shape[-1] != cfg.embed_dim:
            raise ConfigurationError(f"level width {values.shape[-1]} != embed_dim {cfg.embed_dim}")
    mask = group_mask(query_set.is_noisy)
    q, ref = query_set.queries, query_set.ref_points
    layers, preds = [], []
    for layer, head in zip(decoder.layers, decoder.heads):
        q, ref = layer(q, ref, flat, mask)
        layers.append((q, ref))
        preds.append(head(q))
    return DecoderOutput(layers, preds)
