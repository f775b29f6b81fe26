"""Finite-difference suite over every primitive and the composite training paths.

Each check returns the worst relative error reported by :func:`gradcheck`.
Outputs are contracted with a fixed random tensor so that no gradient is
trivially uniform. Zero-initialized projections are randomized first, so
the offset and reference branches carry real gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import EmsdaWeights, emsda, msda_oracle
from .backbone import Backbone, BackboneConfig
from .gradcheck import gradcheck
from .likelihood import FlowModel, LaplaceParams, rle_loss
from .model import ModelConfig, PoseurModel
from .nn import LayerNorm
from .tensor import Tensor

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self):
        return bool(self.error < TOLERANCE)


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _scalar(f, shape_rng):
    """Wrap ``f`` (returning any-shape Tensor) into a scalar via a fixed random contraction."""
    cache = {}

    def g():
        out = f()
        if "w" not in cache:
            cache["w"] = shape_rng.normal(size=out.shape)
        return (out * cache["w"]).sum()

    return g


def _primitive_cases(rng):
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4)
    row = _leaf(rng, 4)
    pos = _leaf(rng, 3, 4, low=0.5, high=2.0)
    m1 = _leaf(rng, 2, 3, 4)
    m2 = _leaf(rng, 2, 4, 5)
    w2 = _leaf(rng, 4, 5)
    mask = rng.uniform(size=(3, 4)) > 0.4
    idx = rng.integers(0, 5, size=(2, 7))
    x3 = _leaf(rng, 2, 5, 3)
    img = _leaf(rng, 2, 3, 6, 6)
    k3 = _leaf(rng, 4, 3, 3, 3)
    bias = _leaf(rng, 4)
    k2 = _leaf(rng, 4, 3, 2, 2)
    vals = _leaf(rng, 2, 20, 3)
    pts = Tensor(rng.uniform(-0.7, 5.3, size=(2, 9, 2)), requires_grad=True)
    far = _leaf(rng, 3, 4, low=-3.0, high=3.0)
    return [
        ("add", lambda: a + b, [a, b]),
        ("add_broadcast", lambda: a + row, [a, row]),
        ("sub", lambda: a - b, [a, b]),
        ("mul", lambda: a * b, [a, b]),
        ("div", lambda: a / pos, [a, pos]),
        ("neg", lambda: -a, [a]),
        ("pow", lambda: pos**2.5, [pos]),
        ("matmul_batched", lambda: m1 @ m2, [m1, m2]),
        ("matmul_shared", lambda: m1 @ w2, [m1, w2]),
        ("getitem_slice", lambda: a[1:, ::2], [a]),
        ("getitem_advanced", lambda: a[np.array([0, 2, 0]), np.array([1, 1, 3])], [a]),
        ("exp", lambda: a.exp(), [a]),
        ("log", lambda: pos.log(), [pos]),
        ("tanh", lambda: a.tanh(), [a]),
        ("sin", lambda: a.sin(), [a]),
        ("cos", lambda: a.cos(), [a]),
        ("sigmoid", lambda: far.sigmoid(), [far]),
        ("relu", lambda: far.relu(), [far]),
        ("abs", lambda: a.abs(), [a]),
        ("sqrt", lambda: pos.sqrt(), [pos]),
        ("clip", lambda: far.clip(-1.0, 1.5), [far]),
        ("sum_axis", lambda: m1.sum(axis=1), [m1]),
        ("mean_axes", lambda: m1.mean(axis=(0, 2), keepdims=True), [m1]),
        ("reshape", lambda: m1.reshape(4, 6), [m1]),
        ("transpose", lambda: m1.transpose(2, 0, 1), [m1]),
        ("softmax", lambda: T.softmax(far, axis=-1), [far]),
        ("concat", lambda: T.concat([a, b], axis=1), [a, b]),
        ("stack", lambda: T.stack([a, b], axis=0), [a, b]),
        ("where_const", lambda: T.where_const(mask, a, 0.3), [a]),
        ("gather", lambda: T.gather(x3, idx), [x3]),
        ("bilinear_gather", lambda: T.bilinear_gather(vals, (4, 5), pts), [vals, pts]),
        ("conv2d_pad", lambda: T.conv2d(img, k3, bias, stride=1, padding=1), [img, k3, bias]),
        ("conv2d_strided", lambda: T.conv2d(img, k3, None, stride=2, padding=1), [img, k3]),
        ("conv2d_patchify", lambda: T.conv2d(img, k2, bias, stride=2, padding=0), [img, k2, bias]),
    ]


def primitive_checks(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for name, f, params in _primitive_cases(rng):
        out.append((f"primitive/{name}", _scalar(f, rng), params, None))
    ln = LayerNorm(5)
    for p in ln.parameters():
        p.data = p.data + rng.normal(0, 0.3, size=p.shape)
    x = _leaf(rng, 3, 5)
    out.append(("primitive/layer_norm", _scalar(lambda: ln(x), rng), [x] + ln.parameters(), None))
    return out


def _randomize_zero_params(module, rng, scale=0.05):
    for p in module.parameters():
        if not np.any(p.data):
            p.data = rng.normal(0.0, scale, size=p.shape)


def attention_checks(seed=0):
    rng = np.random.default_rng(seed)
    C, M, L, S = 8, 2, 2, 2
    w = EmsdaWeights.random(C, M, L, S, rng, scale=0.5)
    q = _leaf(rng, 2, 3, C)
    ref = Tensor(rng.uniform(0.1, 0.9, size=(2, 3, 2)), requires_grad=True)
    levels = [_leaf(rng, 2, C, 5, 4), _leaf(rng, 2, C, 3, 2)]
    params = [q, ref] + levels + w.parameters()
    return [
        ("composite/emsda", _scalar(lambda: emsda(q, ref, levels, w), rng), params, None),
        ("composite/msda_oracle", _scalar(lambda: msda_oracle(q, ref, levels, w), rng), params, None),
    ]


def coarse_check(seed=0, max_entries=6):
    """Backbone, coarse head and the coarse likelihood term."""
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(input_size=(8, 8), channels=[3, 4], strides=[2, 4], num_keypoints=3, embed_dim=8)
    bb = Backbone(cfg, rng)
    flow = FlowModel(rng, depth=2, hidden=4)
    images = rng.uniform(size=(2, 3, 8, 8))
    target = rng.uniform(0.2, 0.8, size=(2, 3, 2))

    def f():
        prop = bb.coarse_proposal(bb.extract_pyramid(images).pooled)
        return rle_loss(LaplaceParams(prop.mu, prop.b), target, flow, mode="residual")

    return ("composite/coarse_head_loss", f, bb.parameters() + flow.parameters(), max_entries)


def decoder_check(seed=0, max_entries=4):
    """Full model loss, including the noisy query group, through every decoder parameter."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        input_size=(8, 8),
        num_keypoints=3,
        channels=[4, 8],
        strides=[2, 4],
        embed_dim=8,
        decoder_layers=2,
        heads=2,
        points=2,
        flow_depth=2,
        flow_hidden=4,
    )
    model = PoseurModel(cfg, seed=seed)
    _randomize_zero_params(model.decoder, rng)
    images = rng.uniform(size=(2, 3, 8, 8))
    target = rng.uniform(0.2, 0.8, size=(2, 3, 2))

    def f():
        return model.loss(model(images, noisy_seed=11), target)

    return ("composite/decoder_loss", f, model.decoder_parameters(), max_entries)


def flow_check(seed=0):
    rng = np.random.default_rng(seed)
    flow = FlowModel(rng, depth=4, hidden=8, scale=0.5)
    mu = Tensor(rng.uniform(0.3, 0.7, size=(3, 4, 2)), requires_grad=True)
    b = Tensor(rng.uniform(0.05, 0.3, size=(3, 4, 2)), requires_grad=True)
    target = rng.uniform(0.2, 0.8, size=(3, 4, 2))
    checks = []
    for mode in ("laplace", "flow", "residual"):
        checks.append(
            (
                f"composite/rle_{mode}",
                lambda mode=mode: rle_loss(LaplaceParams(mu, b), target, flow, mode=mode),
                [mu, b] + (flow.parameters() if mode != "laplace" else []),
                None,
            )
        )
    return checks


def all_checks(seed=0):
    return (
        primitive_checks(seed)
        + attention_checks(seed)
        + flow_check(seed)
        + [coarse_check(seed), decoder_check(seed)]
    )


def run_suite(seed=0, eps=EPS):
    results = []
    for name, f, params, max_entries in all_checks(seed):
        t0 = time.perf_counter()
        err = gradcheck(f, params, eps=eps, max_entries=max_entries, seed=seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
