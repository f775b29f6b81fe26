"""Residual log-likelihood losses, the coupling-layer flow, and Laplace confidence scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .nn import Linear, Module
from .tensor import Tensor, as_tensor, concat

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))
MODES = ("laplace", "flow", "residual")


@dataclass
class LaplaceParams:
    """Per-keypoint, per-axis location ``mu`` and scale ``b``, both ``[..., K, 2]``."""

    mu: Tensor
    b: Tensor

    def numpy(self):
        return np.asarray(as_tensor(self.mu).data), np.asarray(as_tensor(self.b).data)


def laplace_log_pdf(x, mu, b):
    """Elementwise ``log(1/(2b) exp(-|x - mu| / b))``."""
    x, mu, b = as_tensor(x), as_tensor(mu), as_tensor(b)
    return -((x - mu).abs() / b) - (b * 2.0).log()


class _CouplingNet(Module):
    def __init__(self, hidden, rng, scale):
        self.fc1 = Linear(1, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.fc1.weight.data = rng.normal(0.0, scale, size=(1, hidden))
        self.fc1.bias.data = rng.normal(0.0, scale, size=hidden)
        self.fc2.weight.data = rng.normal(0.0, scale / np.sqrt(hidden), size=(hidden, 1))

    def __call__(self, x):
        return self.fc2(self.fc1(x).tanh())


class CouplingLayer(Module):
    """Affine coupling on 2-D points; ``parity`` picks the conditioning coordinate."""

    def __init__(self, parity, hidden, rng, scale=1.0, log_scale_bound=3.0):
        self.parity = parity
        self.scale_net = _CouplingNet(hidden, rng, scale)
        self.shift_net = _CouplingNet(hidden, rng, scale)
        self._bound = log_scale_bound

    def _split(self, x):
        c, t = (0, 1) if self.parity == 0 else (1, 0)
        return x[..., c : c + 1], x[..., t : t + 1], c

    def _params(self, cond):
        log_s = self.scale_net(cond).tanh() * self._bound
        return log_s, self.shift_net(cond)

    def forward(self, z):
        """Generative direction; returns ``(x, log|det dx/dz|)``."""
        cond, moving, c = self._split(z)
        log_s, shift = self._params(cond)
        moved = moving * log_s.exp() + shift
        return _merge(cond, moved, c), log_s[..., 0]

    def inverse(self, x):
        """Density direction; returns ``(z, log|det dz/dx|)``."""
        cond, moving, c = self._split(x)
        log_s, shift = self._params(cond)
        moved = (moving - shift) * (-log_s).exp()
        return _merge(cond, moved, c), -log_s[..., 0]


def _merge(cond, moved, c):
    return concat([cond, moved] if c == 0 else [moved, cond], axis=-1)


class FlowModel(Module):
    """Stack of affine couplings with alternating parity over a standard 2-D normal base.

    ``scale`` sets the spread of the random initialization; ``scale=0``
    gives the identity map.
    """

    def __init__(self, rng, depth=4, hidden=16, scale=0.3, log_scale_bound=3.0):
        self.layers = [CouplingLayer(i % 2, hidden, rng, scale, log_scale_bound) for i in range(depth)]

    def forward(self, z):
        z = as_tensor(z)
        logdet = 0.0
        for layer in self.layers:
            z, ld = layer.forward(z)
            logdet = ld + logdet
        return z, logdet

    def inverse(self, x):
        x = as_tensor(x)
        logdet = 0.0
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x)
            logdet = ld + logdet
        return x, logdet

    def log_prob(self, x):
        """Log density of points ``[..., 2]`` by change of variables."""
        z, logdet = self.inverse(x)
        base = (z * z).sum(axis=-1) * -0.5 - LOG_2PI
        return base + logdet


def flow_log_prob(x, flow: FlowModel):
    return flow.log_prob(x)


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigurationError(f"likelihood mode must be one of {MODES}, got {mode!r}")


def rle_loss(pred: LaplaceParams, target, flow=None, mode="flow"):
    """Negative log-likelihood of ``target`` under the shifted, rescaled density.

    With ``xbar = (target - mu) / b`` the loss per sample is
    ``-log P(xbar) + sum(log b)`` summed over keypoints and axes, then
    averaged over the batch. ``mode`` selects ``log P``: a standard Laplace,
    the flow density, or their sum (residual).
    """
    _check_mode(mode)
    mu, b = as_tensor(pred.mu), as_tensor(pred.b)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if np.any(b.data <= 0):
        raise ContractViolation("scale parameters must be strictly positive")
    if mu.shape != b.shape or mu.shape[-2:] != target.shape[-2:]:
        raise ContractViolation(f"shape mismatch: mu {mu.shape}, b {b.shape}, target {target.shape}")
    if mode != "laplace" and flow is None:
        raise ConfigurationError(f"mode {mode!r} needs a flow model")
    xbar = (target - mu) / b
    log_b = b.log().sum(axis=-1)  # [..., K]
    if mode == "laplace":
        log_p = (-xbar.abs() - LOG_2).sum(axis=-1)
    elif mode == "flow":
        log_p = flow.log_prob(xbar)
    else:
        log_p = (-xbar.abs() - LOG_2).sum(axis=-1) + flow.log_prob(xbar)
    nll = (log_b - log_p).reshape(-1, mu.shape[-2]).sum(axis=-1)
    return nll.mean()


def total_loss(coarse, decoder_layers, target, flow_coarse=None, flow_decoder=None, lam=1.0, mode="flow"):
    """``L_fc + lam * mean_layers(L_dec)``; decoder predictions may carry extra query groups.

    When a decoder prediction has ``g * K`` rows the target is tiled ``g``
    times, so every query group is supervised with equal weight.
    """
    if lam < 0:
        raise ConfigurationError(f"loss balance must be non-negative, got {lam}")
    if not decoder_layers:
        raise ContractViolation("at least one decoder layer output is required")
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    loss = rle_loss(coarse, target, flow_coarse, mode)
    if lam == 0:
        return loss
    K = target.shape[-2]
    dec = None
    for pred in decoder_layers:
        rows = as_tensor(pred.mu).shape[-2]
        if rows % K:
            raise ContractViolation(f"decoder rows {rows} not a multiple of K={K}")
        reps = rows // K
        tgt = np.concatenate([target] * reps, axis=-2) if reps > 1 else target
        term = rle_loss(pred, tgt, flow_decoder, mode)
        dec = term if dec is None else dec + term
    return loss + dec * (lam / len(decoder_layers))


def keypoint_score(params, a=0.2):
    """Laplace mass within ``+-a`` of the prediction, multiplied over the two axes.

    Accepts :class:`LaplaceParams` or a scale array ``[..., K, 2]`` and
    returns ``[..., K]``.
    """
    if a <= 0:
        raise ContractViolation("score interval half-width must be positive")
    b = params.numpy()[1] if isinstance(params, LaplaceParams) else np.asarray(getattr(params, "data", params))
    per_axis = -np.expm1(-a / b)
    return per_axis[..., 0] * per_axis[..., 1]
