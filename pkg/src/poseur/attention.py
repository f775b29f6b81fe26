"""Bilinear sampling and multi-scale deformable cross-attention.

Two routes compute the same attention output:

* :func:`emsda` samples each level at the offset points and applies the
  per-head value projection to the samples only;
* :func:`msda_oracle` projects every position of every level first and then
  samples the projected maps.

Bilinear interpolation is linear in the feature map, so the two agree to
rounding error; their value-projection FLOP counts differ by a factor
``N*L*S / sum(H_l*W_l)`` for ``N`` queries.
"""
from __future__ import annotations

from collections import Counter

import numpy as np

from .errors import ContractViolation
from .nn import Linear, Module, param, xavier
from .tensor import as_tensor, bilinear_gather, concat, softmax


class FlopCounter(Counter):
    """Multiply-add FLOPs (2 per MAC) keyed by category."""

    def matmul(self, category, rows, inner, cols):
        self[category] += 2 * int(rows) * int(inner) * int(cols)

    @property
    def total(self):
        return sum(self.values())


def flatten_level(level):
    """``[B, C, H, W]`` feature map to ``([B, H*W, C], (H, W))``."""
    level = as_tensor(level)
    B, C, H, W = level.shape
    return level.transpose(0, 2, 3, 1).reshape(B, H * W, C), (H, W)


def sample_points(values, hw, points):
    """Bilinear lookup with zero padding.

    ``values`` is a flattened map ``[B, H*W, C]``, ``points`` ``[B, P, 2]``
    holds (column, row) grid coordinates. Returns ``[B, P, C]``,
    differentiable with respect to both the map and the points.
    """
    return bilinear_gather(values, hw, points)


def bilinear_sample(feature, p):
    """Sample a single ``[C, H, W]`` map at grid point ``p = (column, row)``; returns ``[C]``."""
    feature = as_tensor(feature)
    C, H, W = feature.shape
    values, hw = flatten_level(feature.reshape(1, C, H, W))
    return sample_points(values, hw, as_tensor(p).reshape(1, 1, 2)).reshape(C)


class EmsdaWeights(Module):
    """Projections for one deformable cross-attention block.

    ``value_proj`` is ``[M, C, C/M]`` (one ``W^v_i`` per head) and
    ``output_proj`` is ``[C, C]``. Offsets are produced in level-grid units.
    """

    def __init__(self, dim, heads, levels, points, rng):
        if dim % heads:
            raise ContractViolation(f"width {dim} not divisible by {heads} heads")
        self.heads, self.levels, self.points = heads, levels, points
        n = heads * levels * points
        self.offsets = Linear(dim, 2 * n, rng, zero=True)
        theta = 2.0 * np.pi * np.arange(heads) / heads
        grid = np.stack([np.cos(theta), np.sin(theta)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, levels, points, 1))
        grid *= np.arange(1, points + 1)[None, None, :, None] * 0.5
        self.offsets.bias.data = grid.reshape(-1).copy()
        self.attention = Linear(dim, n, rng, zero=True)
        d = dim // heads
        self.value_proj = param(np.stack([xavier(rng, dim, d) for _ in range(heads)]))
        self.output_proj = param(xavier(rng, dim, dim))

    @classmethod
    def random(cls, dim, heads, levels, points, rng, scale=1.0):
        """Weights with every projection randomized, for equivalence and gradient tests."""
        w = cls(dim, heads, levels, points, rng)
        n = heads * levels * points
        w.offsets.weight.data = rng.normal(0.0, 0.3 * scale, size=(dim, 2 * n))
        w.offsets.bias.data = rng.normal(0.0, 1.0 * scale, size=2 * n)
        w.attention.weight.data = rng.normal(0.0, 0.5 * scale, size=(dim, n))
        w.attention.bias.data = rng.normal(0.0, 0.5 * scale, size=n)
        return w


def sampling_plan(queries, ref_points, shapes, weights):
    """Attention weights ``[B, N, M, L, S]`` and sampling locations per level.

    Locations for level ``l`` are ``[B, N, M, S, 2]`` grid coordinates
    ``ref * (W_l - 1, H_l - 1) + offset``.
    """
    queries, ref_points = as_tensor(queries), as_tensor(ref_points)
    B, N, _ = queries.shape
    M, L, S = weights.heads, weights.levels, weights.points
    if len(shapes) != L:
        raise ContractViolation(f"pyramid has {len(shapes)} levels, weights expect {L}")
    offsets = weights.offsets(queries).reshape(B, N, M, L, S, 2)
    logits = weights.attention(queries).reshape(B, N, M, L * S)
    attn = softmax(logits, axis=-1).reshape(B, N, M, L, S)
    ref = ref_points.reshape(B, N, 1, 1, 2)
    locations = []
    for l, (H, W) in enumerate(shapes):
        scale = np.array([W - 1.0, H - 1.0])
        locations.append(ref * scale + offsets[:, :, :, l])
    return attn, locations


def _check_widths(flat, C, weights):
    expected = weights.output_proj.shape[0]
    for values, _ in flat:
        if values.shape[-1] != C or C != expected:
            raise ContractViolation(f"level width {values.shape[-1]}, query width {C}, weights expect {expected}")


def _mix_heads(per_head, attn, weights, B, N):
    """``per_head`` ``[M, B, N, L*S, d]`` weighted by ``attn`` and merged through ``W^o``."""
    M, L, S = weights.heads, weights.levels, weights.points
    a = attn.reshape(B, N, M, L * S).transpose(2, 0, 1, 3).reshape(M, B, N, L * S, 1)
    heads = (per_head * a).sum(axis=3)  # [M, B, N, d]
    merged = heads.transpose(1, 2, 0, 3).reshape(B, N, -1)
    return merged @ weights.output_proj


def emsda(queries, ref_points, levels, weights, flops=None, return_attention=False):
    """Deformable cross-attention with the value projection applied after sampling.

    ``queries`` ``[B, N, C]``, ``ref_points`` ``[B, N, 2]`` normalized,
    ``levels`` a list of ``[B, C, H_l, W_l]`` maps or pre-flattened
    ``(values, (H, W))`` pairs. Returns ``[B, N, C]``.
    """
    flat = [lv if isinstance(lv, tuple) else flatten_level(lv) for lv in levels]
    queries = as_tensor(queries)
    B, N, C = queries.shape
    M, S = weights.heads, weights.points
    d = C // M
    _check_widths(flat, C, weights)
    attn, locations = sampling_plan(queries, ref_points, [hw for _, hw in flat], weights)
    sampled = []
    for (values, hw), loc in zip(flat, locations):
        pts = loc.reshape(B, N * M * S, 2)
        sampled.append(sample_points(values, hw, pts).reshape(B, N, M, S, C))
        if flops is not None:
            flops["sampling"] += 2 * 4 * B * N * M * S * C
    stacked = concat(sampled, axis=3)  # [B, N, M, L*S, C]
    LS = stacked.shape[3]
    rows = stacked.transpose(2, 0, 1, 3, 4).reshape(M, B * N * LS, C)
    per_head = (rows @ weights.value_proj).reshape(M, B, N, LS, d)
    if flops is not None:
        flops.matmul("value_projection", M * B * N * LS, C, d)
        flops.matmul("output_projection", B * N, C, C)
        flops["attention_weighting"] += 2 * B * N * M * LS * d
    out = _mix_heads(per_head, attn, weights, B, N)
    return (out, attn) if return_attention else out


def msda_oracle(queries, ref_points, levels, weights, flops=None):
    """Same contract as :func:`emsda`, projecting whole maps before sampling."""
    flat = [lv if isinstance(lv, tuple) else flatten_level(lv) for lv in levels]
    queries = as_tensor(queries)
    B, N, C = queries.shape
    M, S = weights.heads, weights.points
    d = C // M
    _check_widths(flat, C, weights)
    attn, locations = sampling_plan(queries, ref_points, [hw for _, hw in flat], weights)
    sampled = []
    for (values, hw), loc in zip(flat, locations):
        HW = values.shape[1]
        projected = (values.reshape(1, B * HW, C) @ weights.value_proj).reshape(M * B, HW, d)
        pts = loc.transpose(2, 0, 1, 3, 4).reshape(M * B, N * S, 2)
        sampled.append(sample_points(projected, hw, pts).reshape(M, B, N, S, d))
        if flops is not None:
            flops.matmul("value_projection", B * HW, C, M * d)
            flops["sampling"] += 2 * 4 * B * N * M * S * d
    per_head = concat(sampled, axis=3)  # [M, B, N, L*S, d]
    if flops is not None:
        LS = per_head.shape[3]
        flops.matmul("output_projection", B * N, C, C)
        flops["attention_weighting"] += 2 * B * N * M * LS * d
    return _mix_heads(per_head, attn, weights, B, N)


def analytic_value_projection_flops(dim, heads, points, level_shapes, queries=1, batch=1):
    """Closed-form value-projection FLOPs ``(emsda, msda)``."""
    L = len(level_shapes)
    e = 2 * batch * queries * heads * L * points * dim * (dim // heads)
    m = 2 * batch * sum(h * w for h, w in level_shapes) * dim * dim
    return e, m
