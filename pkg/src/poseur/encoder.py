"""Keypoint query initialization: positional + class embeddings, noisy reference groups."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .nn import Module, param
from .rng import SplitMix64
from .tensor import Tensor, as_tensor, concat

TEMPERATURE = 10000.0


@dataclass
class KeypointQuerySet:
    queries: Tensor  # [B, K', C]
    ref_points: Tensor  # [B, K', 2]
    is_noisy: np.ndarray  # [K'] bool

    @property
    def num_queries(self):
        return self.queries.shape[1]


def sincos_embed(coords, dim):
    """Sine-cosine embedding of normalized 2-D coordinates.

    ``coords`` has shape ``[..., 2]``; the result is ``[..., dim]`` with the x
    channels first, then y. Within an axis, channel ``t`` uses frequency
    ``TEMPERATURE ** (-2 * (t // 2) / (dim / 2))``; even channels are sines,
    odd channels cosines. Differentiable in ``coords``.
    """
    if dim % 4:
        raise ConfigurationError(f"embedding width must be divisible by 4, got {dim}")
    coords = as_tensor(coords)
    half = dim // 2
    t = np.arange(half)
    freq = TEMPERATURE ** (-2.0 * (t // 2) / half)
    is_sin = (t % 2 == 0).astype(np.float64)
    parts = []
    for axis in range(2):
        angle = coords[..., axis : axis + 1] * freq
        parts.append(angle.sin() * is_sin + angle.cos() * (1.0 - is_sin))
    return concat(parts, axis=-1)


def init_queries(mu, class_embed):
    """Queries ``Q_c + sincos(mu)`` with ``mu`` as reference points.

    ``mu`` is ``[B, K, 2]`` (or ``[K, 2]``), ``class_embed`` is ``[K, C]``.
    """
    mu = as_tensor(mu)
    if mu.ndim == 2:
        mu = mu.reshape((1,) + mu.shape)
    K, C = class_embed.shape
    if mu.shape[1:] != (K, 2):
        raise ContractViolation(f"proposal shape {mu.shape} does not match class embedding {class_embed.shape}")
    queries = sincos_embed(mu, C) + class_embed
    return KeypointQuerySet(queries, mu, np.zeros(K, dtype=bool))


def sample_noisy_references(num_keypoints, seed, batch=None, training=True):
    """I.i.d. uniform points in ``[0, 1]^2``, shape ``[K, 2]`` or ``[batch, K, 2]``."""
    if not training:
        raise ContractViolation("noisy reference points are a training-only augmentation")
    shape = (num_keypoints, 2) if batch is None else (batch, num_keypoints, 2)
    return SplitMix64(seed).uniform(shape)


class KeypointEncoder(Module):
    """Holds the learned class embedding and assembles query sets."""

    def __init__(self, num_keypoints, embed_dim, rng):
        if embed_dim % 4:
            raise ConfigurationError(f"embedding width must be divisible by 4, got {embed_dim}")
        self.class_embed = param(rng.normal(0.0, 0.1, size=(num_keypoints, embed_dim)))

    def __call__(self, mu, noisy_seed=None):
        """Proposal group, plus a noisy group when ``noisy_seed`` is given."""
        proposal = init_queries(mu, self.class_embed)
        if noisy_seed is None:
            return proposal
        B, K = proposal.ref_points.shape[:2]
        noisy_mu = Tensor(sample_noisy_references(K, noisy_seed, batch=B))
        noisy = init_queries(noisy_mu, self.class_embed)
        return KeypointQuerySet(
            concat([proposal.queries, noisy.queries], axis=1),
            concat([proposal.ref_points, noisy.ref_points], axis=1),
            np.concatenate([proposal.is_noisy, np.ones(K, dtype=bool)]),
        )
