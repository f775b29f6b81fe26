"""Top-down sample preparation, the training loop, inference and evaluation."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import EmptyInputError, FormatError, NonFiniteLossError
from .evaluation import OksConfig, PoseInstance, average_precision, pck
from .likelihood import keypoint_score
from .model import PoseurModel
from .optim import AdamW, milestone_lr
from .rng import SplitMix64, derive_seed
from .synth import aspect_bbox, crop_resize, read_dataset, synth_generate
from .tensor import backward

# stream tags for derive_seed
_ORDER, _NOISY, _BOX = 1, 2, 3
SLOW_PARAMS = ("offsets", "ref_update")


@dataclass
class Samples:
    """Cropped patches and their ground truth, one row per instance."""

    patches: np.ndarray  # [N, 3, h, w]
    targets: np.ndarray  # [N, K, 2] normalized to the patch
    transforms: list
    instances: list  # ground-truth PoseInstance per row

    def __len__(self):
        return len(self.patches)


def prepare_samples(scenes, input_size, expand=1.0):
    patches, targets, transforms, instances = [], [], [], []
    for scene in scenes:
        for inst in scene.instances:
            box = aspect_bbox(inst.bbox, input_size, expand)
            patch, norm, tf = crop_resize(scene.image, inst.keypoints, box, input_size)
            patches.append(patch)
            targets.append(norm)
            transforms.append(tf)
            instances.append(inst)
    if not patches:
        raise EmptyInputError("dataset contains no instances")
    return Samples(np.stack(patches), np.stack(targets), transforms, instances)


def load_scenes(config: RunConfig, directory=None, seed=None):
    """Scenes from ``directory`` when given, else generated from the config."""
    if directory is not None:
        manifest, scenes = read_dataset(directory)
        if manifest["num_keypoints"] != config.num_keypoints:
            raise FormatError(
                f"{directory}: dataset has {manifest['num_keypoints']} keypoints, config expects {config.num_keypoints}"
            )
        return scenes
    return synth_generate(config.seed if seed is None else seed, config.num_scenes, config.synth_config())


def lr_multipliers(model, factor):
    return {id(p): factor for name, p in model.named_parameters() if any(s in name for s in SLOW_PARAMS)}


def batch_indices(seed, step, n, batch_size):
    """Rows for ``step``: contiguous slices of a per-epoch permutation."""
    if batch_size >= n:
        return np.arange(n)
    per_epoch = n // batch_size
    epoch, slot = divmod(step, per_epoch)
    order = np.argsort(SplitMix64(derive_seed(seed, _ORDER, epoch)).uniform(n), kind="stable")
    return order[slot * batch_size : (slot + 1) * batch_size]


def _milestone_steps(config):
    return sorted({int(round(f * config.steps)) for f in config.milestones})


def _write_jsonl(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def save_model(path, model: PoseurModel, config: RunConfig, step):
    save_checkpoint(path, model.state_dict(), {"config": config.to_dict(), "step": int(step)})


def load_model(path, config: RunConfig | None = None):
    """Rebuild a model from a checkpoint; ``config`` defaults to the stored one."""
    from .config import from_mapping

    tensors, meta = load_checkpoint(path)
    if config is None:
        if "config" not in meta:
            raise FormatError(f"{path}: checkpoint carries no config")
        config = from_mapping(meta["config"])
    model = PoseurModel(config.model_config(), seed=config.seed)
    model.load_state_dict(tensors)
    return model, config


def mean_l1_px(pred_px, gt_px):
    """Mean over keypoints of ``|dx| + |dy|`` in pixels."""
    return float(np.mean(np.abs(np.asarray(pred_px) - np.asarray(gt_px)).sum(axis=-1)))


def train(config: RunConfig, samples: Samples | None = None, out_dir=None, on_step=None, stop_after=None):
    """Optimize the model on ``samples``; returns ``(model, history)``.

    ``stop_after`` runs only that many steps of the configured schedule
    (the learning-rate milestones still refer to ``config.steps``).
    ``history`` holds the logged records. With ``out_dir`` set, records are
    appended to ``metrics.jsonl`` (first line: the resolved config) and
    checkpoints are written at each decay milestone and at the end.
    """
    if samples is None:
        samples = prepare_samples(load_scenes(config, config.data_dir), config.input_size, config.bbox_expand)
    if len(samples) == 0:
        raise EmptyInputError("cannot train on zero samples")
    model = PoseurModel(config.model_config(), seed=config.seed)
    model.train()
    opt = AdamW(
        model.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        lr_mult=lr_multipliers(model, config.offset_lr_mult),
    )
    milestones = _milestone_steps(config)
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
    history = []
    _write_jsonl(fh, {"event": "config", "config": config.to_dict()})
    running, seen = 0.0, 0
    try:
        last = config.steps if stop_after is None else min(config.steps, int(stop_after))
        for step in range(last):
            rows = batch_indices(config.seed, step, len(samples), config.batch_size)
            noisy_seed = derive_seed(config.seed, _NOISY, step)
            out = model(samples.patches[rows], noisy_seed=noisy_seed)
            loss = model.loss(out, samples.targets[rows])
            value = loss.item()
            if not np.isfinite(value):
                dump = None
                if out_dir is not None:
                    dump = os.path.join(out_dir, f"nonfinite_step{step}.json")
                    with open(dump, "w") as dfh:
                        json.dump({"step": step, "batch_seed": noisy_seed, "rows": rows.tolist(), "loss": repr(value)}, dfh)
                raise NonFiniteLossError(f"non-finite loss {value} at step {step}", batch_seed=noisy_seed, dump_path=dump)
            opt.zero_grad()
            backward(loss)
            opt.step(milestone_lr(config.lr, step, config.steps, config.milestones, config.decay_factor))
            running += value
            seen += 1
            if on_step is not None:
                on_step(step, value, model)
            done = step + 1
            if done % config.log_every == 0 or done == last:
                record = {
                    "event": "train",
                    "step": done,
                    "epoch": done * min(config.batch_size, len(samples)) / len(samples),
                    "lr": milestone_lr(config.lr, step, config.steps, config.milestones, config.decay_factor),
                    "loss": running / seen,
                }
                history.append(record)
                _write_jsonl(fh, record)
                running, seen = 0.0, 0
            if out_dir is not None and done in milestones:
                save_model(os.path.join(out_dir, f"checkpoint_step{done}.bin"), model, config, done)
        if out_dir is not None:
            save_model(os.path.join(out_dir, "checkpoint.bin"), model, config, last)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return model, history


def predict_normalized(model: PoseurModel, patches, batch_size=64, proposal_override=None):
    """Inference-mode forward (proposal queries only); returns ``(mu, b)`` arrays."""
    was_training = model.training
    model.eval()
    mus, bs = [], []
    try:
        for i in range(0, len(patches), batch_size):
            override = None if proposal_override is None else proposal_override[i : i + batch_size]
            final = model(patches[i : i + batch_size], proposal_override=override).final
            mu, b = final.numpy()
            mus.append(mu)
            bs.append(b)
    finally:
        model.train(was_training)
    if not mus:
        raise EmptyInputError("no patches to predict")
    return np.concatenate(mus), np.concatenate(bs)


def detection_bbox_score(seed, image_id):
    """Stand-in person-detector confidence, fixed per ``(seed, image_id)``."""
    return SplitMix64(derive_seed(seed, _BOX, image_id)).uniform(low=0.5, high=1.0)


def predict_instances(model, samples: Samples, seed=0, score_a=0.2, proposal_override=None):
    """Detections in image pixels with keypoint and box scores."""
    mu, b = predict_normalized(model, samples.patches, proposal_override=proposal_override)
    kp = keypoint_score(b, a=score_a)
    out = []
    for i, (tf, gt) in enumerate(zip(samples.transforms, samples.instances)):
        out.append(
            PoseInstance(
                image_id=gt.image_id,
                keypoints=tf.denormalize(mu[i]),
                visibility=np.full(len(mu[i]), 2.0),
                bbox=gt.bbox,
                bbox_score=detection_bbox_score(seed, gt.image_id),
                kp_scores=kp[i],
                area=gt.area,
            )
        )
    return out


def evaluate_instances(detections, gts, rescore=True, cfg: OksConfig | None = None):
    if not gts:
        raise EmptyInputError("evaluation over an empty dataset")
    ap = average_precision(detections, gts, cfg, rescore=rescore)
    # detections are produced one per ground truth, in the same order
    paired = len(detections) == len(gts)
    report = {
        "ap": ap["ap"],
        "thresholds": ap["thresholds"],
        "mean_ap": ap["mean_ap"],
        "rescore": bool(rescore),
        "num_instances": len(gts),
        "num_detections": len(detections),
    }
    if paired:
        report["pck"] = pck(detections, gts)
        report["mean_l1_px"] = mean_l1_px([d.keypoints for d in detections], [g.keypoints for g in gts])
    return report


def evaluate(model, samples: Samples, seed=0, score_a=0.2, rescore=True):
    if len(samples) == 0:
        raise EmptyInputError("evaluation over an empty dataset")
    detections = predict_instances(model, samples, seed=seed, score_a=score_a)
    report = evaluate_instances(detections, samples.instances, rescore=rescore)
    report["score_a"] = score_a
    return report, detections
