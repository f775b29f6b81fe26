"""Keypoint evaluation: OKS, COCO-style AP with instance rescoring, PCK.

Also carries an exhaustive matcher used to cross-check the greedy one on
small cases.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, EmptyInputError

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class PoseInstance:
    image_id: int
    keypoints: np.ndarray  # [K, 2] absolute pixels
    visibility: np.ndarray  # [K]
    bbox: tuple  # (x, y, w, h)
    bbox_score: float = 1.0
    kp_scores: np.ndarray = None
    area: float = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        K = len(self.keypoints)
        self.visibility = np.asarray(self.visibility if self.visibility is not None else np.ones(K), dtype=np.float64)
        self.bbox = tuple(float(v) for v in self.bbox)
        if self.kp_scores is None:
            self.kp_scores = np.ones(K)
        self.kp_scores = np.asarray(self.kp_scores, dtype=np.float64)
        if self.area is None:
            self.area = self.bbox[2] * self.bbox[3]
        self.area = float(self.area)
        if self.area <= 0:
            raise ContractViolation(f"instance area must be positive, got {self.area}")
        if not 0.0 <= self.bbox_score <= 1.0 or np.any((self.kp_scores < 0) | (self.kp_scores > 1)):
            raise ContractViolation("scores must lie in [0, 1]")

    @property
    def num_keypoints(self):
        return len(self.keypoints)

    def to_record(self):
        flat = np.column_stack([self.keypoints, self.visibility]).reshape(-1)
        return {
            "image_id": int(self.image_id),
            "keypoints": [float(v) for v in flat],
            "bbox": list(self.bbox),
            "bbox_score": float(self.bbox_score),
            "kp_scores": [float(v) for v in self.kp_scores],
            "area": self.area,
        }

    @classmethod
    def from_record(cls, rec):
        trip = np.asarray(rec["keypoints"], dtype=np.float64).reshape(-1, 3)
        return cls(
            image_id=int(rec["image_id"]),
            keypoints=trip[:, :2],
            visibility=trip[:, 2],
            bbox=rec["bbox"],
            bbox_score=float(rec.get("bbox_score", 1.0)),
            kp_scores=rec.get("kp_scores"),
            area=rec.get("area"),
        )


def write_jsonl(path, instances):
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record()) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [PoseInstance.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class OksConfig:
    falloff: np.ndarray | float = 0.08
    thresholds: tuple = field(default=DEFAULT_THRESHOLDS)

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if any(not 0.0 < t < 1.0 for t in self.thresholds):
            raise ConfigurationError("OKS thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigurationError("OKS thresholds must be strictly increasing")
        if np.any(np.asarray(self.falloff) <= 0):
            raise ConfigurationError("per-keypoint falloff constants must be positive")

    def falloff_for(self, K):
        k = np.asarray(self.falloff, dtype=np.float64)
        return np.full(K, float(k)) if k.ndim == 0 else k


def instance_score(inst: PoseInstance):
    """Box score times the mean keypoint score."""
    return float(inst.bbox_score * np.sum(inst.kp_scores) / inst.num_keypoints)


def oks(pred, gt: PoseInstance, cfg: OksConfig | None = None):
    """Object keypoint similarity over the visible ground-truth keypoints."""
    cfg = cfg or OksConfig()
    pred = np.asarray(getattr(pred, "keypoints", pred), dtype=np.float64).reshape(-1, 2)
    vis = gt.visibility > 0
    if not vis.any():
        raise ContractViolation("OKS is undefined without visible ground-truth keypoints")
    k = cfg.falloff_for(gt.num_keypoints)
    d2 = np.sum((pred - gt.keypoints) ** 2, axis=1)
    e = np.exp(-d2 / (2.0 * gt.area * k * k))
    return float(e[vis].mean())


def _group(items):
    out = {}
    for it in items:
        out.setdefault(int(it.image_id), []).append(it)
    return out


def _scores(detections, rescore):
    return np.array([instance_score(d) if rescore else d.bbox_score for d in detections], dtype=np.float64)


def greedy_match(oks_matrix, threshold):
    """Greedy matching; rows are detections already in descending score order.

    Each detection takes the unmatched ground truth with the highest OKS at
    or above ``threshold`` (lowest index on ties). Returns the matched gt
    index per detection, ``-1`` for none.
    """
    D, G = oks_matrix.shape
    taken = np.zeros(G, dtype=bool)
    match = np.full(D, -1)
    for i in range(D):
        best, best_j = -1.0, -1
        for j in range(G):
            if taken[j]:
                continue
            v = oks_matrix[i, j]
            if v >= threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            match[i] = best_j
    return match


def exhaustive_match(oks_matrix, threshold):
    """Enumerate every injective partial assignment and return the greedy-consistent one.

    The chosen assignment maximizes, lexicographically over detections in
    score order, the key ``(oks, -gt_index)`` of each detection's match, with
    unmatched detections ranked below any match. Meant for at most a few
    instances per image.
    """
    D, G = oks_matrix.shape
    options = [[-1] + [j for j in range(G) if oks_matrix[i, j] >= threshold] for i in range(D)]
    best_key, best = None, np.full(D, -1)
    for combo in itertools.product(*options):
        used = [j for j in combo if j >= 0]
        if len(used) != len(set(used)):
            continue
        key = tuple((oks_matrix[i, j], -j) if j >= 0 else (-1.0, 0) for i, j in enumerate(combo))
        if best_key is None or key > best_key:
            best_key, best = key, np.array(combo)
    return best


def _ordered(detections, rescore):
    scores = _scores(detections, rescore)
    order = np.argsort(-scores, kind="mergesort")
    return [detections[i] for i in order], scores[order]


def _true_positive_flags(detections, gts_by_image, cfg, rescore, matcher):
    dets, scores = _ordered(detections, rescore)
    by_image = {}
    for rank, det in enumerate(dets):
        by_image.setdefault(int(det.image_id), []).append(rank)
    flags = np.zeros((len(cfg.thresholds), len(dets)), dtype=bool)
    for image_id, ranks in by_image.items():
        gts = gts_by_image.get(image_id, [])
        if not gts:
            continue
        mat = np.array([[oks(dets[r].keypoints, g, cfg) for g in gts] for r in ranks])
        for t, thr in enumerate(cfg.thresholds):
            m = matcher(mat, thr)
            flags[t, ranks] = m >= 0
    return flags, scores


def _interpolated_ap(tp, n_gt):
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, len(tp) + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(precision)
    q = np.zeros(len(RECALL_POINTS))
    q[valid] = precision[idx[valid]]
    return float(np.mean(q))


def _prepare(detections, gts, cfg):
    cfg = cfg or OksConfig()
    gts_by_image = gts if isinstance(gts, dict) else _group(gts)
    gts_by_image = {int(k): list(v) for k, v in gts_by_image.items()}
    n_gt = sum(len(v) for v in gts_by_image.values())
    return cfg, gts_by_image, n_gt


def average_precision(detections, gts, cfg: OksConfig | None = None, rescore=True):
    """COCO-style keypoint AP.

    ``gts`` is a flat list of :class:`PoseInstance` or a dict
    ``image_id -> list``. Detections are ranked by instance score (box score
    only when ``rescore`` is false), matched greedily per image, and the
    101-point interpolated precision is averaged per OKS threshold.
    """
    cfg, gts_by_image, n_gt = _prepare(detections, gts, cfg)
    flags, _ = _true_positive_flags(list(detections), gts_by_image, cfg, rescore, greedy_match)
    per = [_interpolated_ap(flags[t], n_gt) for t in range(len(cfg.thresholds))]
    return {"thresholds": list(cfg.thresholds), "ap": per, "mean_ap": float(np.mean(per))}


def average_precision_bruteforce(detections, gts, cfg: OksConfig | None = None, rescore=True):
    """Reference AP: exhaustive matching and direct max-precision interpolation."""
    cfg, gts_by_image, n_gt = _prepare(detections, gts, cfg)
    flags, _ = _true_positive_flags(list(detections), gts_by_image, cfg, rescore, exhaustive_match)
    per = []
    for t in range(len(cfg.thresholds)):
        tp = flags[t]
        if n_gt == 0:
            per.append(0.0)
            continue
        points = []
        for k in range(1, len(tp) + 1):
            hits = int(tp[:k].sum())
            points.append((hits / n_gt, hits / k))
        curve = []
        for r in RECALL_POINTS:
            reach = [p for rc, p in points if rc >= r]
            curve.append(max(reach) if reach else 0.0)
        per.append(float(np.mean(curve)))
    return {"thresholds": list(cfg.thresholds), "ap": per, "mean_ap": float(np.mean(per))}


def pck(preds, gts, norm=None, alpha=0.5):
    """Fraction of visible keypoints within ``alpha * norm`` pixels.

    ``norm`` defaults to each ground truth's bbox diagonal.
    """
    gts = list(gts)
    if not gts:
        raise EmptyInputError("PCK over zero instances")
    if norm is None:
        norm = [np.hypot(g.bbox[2], g.bbox[3]) for g in gts]
    norm = np.broadcast_to(np.asarray(norm, dtype=np.float64), (len(gts),))
    if np.any(norm <= 0):
        raise ContractViolation("PCK normalizer must be positive")
    hits = total = 0
    for pred, g, n in zip(preds, gts, norm):
        pred = np.asarray(getattr(pred, "keypoints", pred), dtype=np.float64).reshape(-1, 2)
        vis = g.visibility > 0
        d = np.linalg.norm(pred - g.keypoints, axis=1)
        hits += int(np.sum((d <= alpha * n) & vis))
        total += int(vis.sum())
    if total == 0:
        raise EmptyInputError("PCK over zero visible keypoints")
    return hits / total
