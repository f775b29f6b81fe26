"""Direction-only ablations at desk scale.

``rescoring_trial`` builds detections whose keypoints carry Laplace noise of
a known per-keypoint scale, reports that scale as a calibrated prediction,
and compares AP ranked by the instance score against AP ranked by the box
score alone.

``noisy_reference_trial`` trains the tiny model with and without the noisy
query group and measures keypoint error when the coarse proposal fed to the
decoder is corrupted.
"""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .evaluation import PoseInstance, average_precision
from .likelihood import keypoint_score
from .rng import SplitMix64, derive_seed
from .synth import SynthConfig, synth_generate
from .training import mean_l1_px, predict_normalized, prepare_samples, train

_RESCORE, _CORRUPT = 11, 12


def rescoring_trial(seed, n=500, scale_range=(0.004, 0.15), score_a=0.2, cfg=None):
    """``(ap_rescored, ap_box_only)`` on ``n`` single-figure scenes.

    Per-keypoint noise scales are drawn log-uniformly from ``scale_range``
    (as a fraction of the bbox size), so instances differ widely in quality.
    """
    cfg = cfg or SynthConfig()
    scenes = synth_generate(seed, n, cfg, render_image=False)
    rng = SplitMix64(derive_seed(seed, _RESCORE))
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    gts, dets = [], []
    for scene in scenes:
        for gt in scene.instances:
            K = gt.num_keypoints
            b = np.exp(rng.uniform((K, 2), lo, hi))
            size = np.array(gt.bbox[2:])
            noise = rng.laplace(scale=b * size, size=(K, 2))
            dets.append(
                PoseInstance(
                    image_id=gt.image_id,
                    keypoints=gt.keypoints + noise,
                    visibility=np.full(K, 2.0),
                    bbox=gt.bbox,
                    bbox_score=rng.uniform(low=0.5, high=1.0),
                    kp_scores=keypoint_score(b, a=score_a),
                    area=gt.area,
                )
            )
            gts.append(gt)
    with_rescore = average_precision(dets, gts, rescore=True)["mean_ap"]
    box_only = average_precision(dets, gts, rescore=False)["mean_ap"]
    return with_rescore, box_only


def corrupt_proposals(mu, seed, amplitude=0.2):
    """``mu`` plus i.i.d. uniform noise in ``[-amplitude, amplitude]``, clipped to ``[0, 1]``."""
    noise = SplitMix64(derive_seed(seed, _CORRUPT)).uniform(np.shape(mu), -amplitude, amplitude)
    return np.clip(mu + noise, 0.0, 1.0)


def proposal_error(model, samples, seed, amplitude=0.2):
    """Mean keypoint L1 error (pixels) when the coarse proposal is corrupted."""
    model.eval()
    pooled = model.backbone.extract_pyramid(samples.patches).pooled
    mu = model.backbone.coarse_proposal(pooled).mu.data
    override = corrupt_proposals(mu, seed, amplitude)
    pred, _ = predict_normalized(model, samples.patches, proposal_override=override)
    px = [tf.denormalize(p) for tf, p in zip(samples.transforms, pred)]
    return mean_l1_px(px, [g.keypoints for g in samples.instances])


def noisy_reference_trial(seed, config: RunConfig | None = None, n_train=64, n_eval=64, amplitude=0.2):
    """``(error_with_noisy, error_without)`` in pixels under corrupted proposals."""
    config = (config or RunConfig(steps=600, batch_size=16, log_every=600)).replace(seed=seed)
    train_samples = prepare_samples(synth_generate(seed, n_train, config.synth_config()), config.input_size)
    eval_seed = derive_seed(seed, _CORRUPT, 1)
    eval_samples = prepare_samples(synth_generate(eval_seed, n_eval, config.synth_config()), config.input_size)
    errors = []
    for noisy in (True, False):
        model, _ = train(config.replace(noisy_references=noisy), train_samples)
        errors.append(proposal_error(model, eval_samples, eval_seed, amplitude))
    return tuple(errors)
