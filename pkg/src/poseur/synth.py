"""Deterministic stick-figure scenes and the top-down crop/resize transform.

Every scene draws from its own SplitMix64 stream keyed by ``(seed, index)``,
so scenes regenerate bit-identically on any platform and can be produced in
any order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation, FormatError
from .evaluation import PoseInstance, write_jsonl
from .rng import SplitMix64, derive_seed

FORMAT_VERSION = 1

# Joint order keeps every prefix a connected tree, so K < 8 takes the first K.
JOINTS = ("neck", "head", "pelvis", "left_elbow", "right_elbow", "left_hand", "right_hand", "knee")
PARENTS = (-1, 0, 0, 0, 0, 3, 4, 2)
# (mean direction in radians, jitter, relative length range); image y grows downwards
LIMBS = {
    1: (-np.pi / 2, 0.35, (0.45, 0.6)),
    2: (np.pi / 2, 0.25, (0.9, 1.1)),
    3: (np.pi * 0.75, 0.6, (0.5, 0.7)),
    4: (np.pi * 0.25, 0.6, (0.5, 0.7)),
    5: (None, 1.2, (0.45, 0.6)),
    6: (None, 1.2, (0.45, 0.6)),
    7: (np.pi / 2, 0.6, (0.6, 0.8)),
}
PALETTE = np.array(
    [
        [1.00, 0.10, 0.10],
        [0.10, 1.00, 0.10],
        [0.15, 0.25, 1.00],
        [1.00, 1.00, 0.05],
        [1.00, 0.05, 1.00],
        [0.05, 1.00, 1.00],
        [1.00, 0.55, 0.00],
        [0.55, 0.00, 1.00],
    ]
)
LIMB_COLOR = np.array([0.92, 0.92, 0.92])


@dataclass
class SynthConfig:
    num_keypoints: int = 8
    image_size: tuple = (64, 64)
    figures_per_image: int = 1

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if not 2 <= self.num_keypoints <= len(JOINTS):
            raise ConfigurationError(f"num_keypoints must be in [2, {len(JOINTS)}]")
        if self.figures_per_image < 1:
            raise ConfigurationError("figures_per_image must be >= 1")


@dataclass
class SyntheticScene:
    image: np.ndarray  # [3, H, W] float32
    instances: list
    seed: int
    index: int


def scene_seed(seed, index):
    return derive_seed(seed, index)


def sample_pose(rng: SplitMix64, K, center, scale):
    """Joint coordinates ``[K, 2]`` for one figure around ``center``."""
    pts = np.zeros((K, 2))
    pts[0] = center
    torso = scale
    for j in range(1, K):
        direction, jitter, (lo, hi) = LIMBS[j]
        parent = PARENTS[j]
        if direction is None:
            grand = PARENTS[parent]
            v = pts[parent] - pts[grand]
            direction = np.arctan2(v[1], v[0])
        angle = direction + rng.uniform(low=-jitter, high=jitter)
        length = torso * rng.uniform(low=lo, high=hi)
        pts[j] = pts[parent] + length * np.array([np.cos(angle), np.sin(angle)])
    return pts


def _fit_inside(pts, region, margin):
    """Shrink about the center if needed, then translate ``pts`` into ``region`` minus margin."""
    x0, y0, x1, y1 = region
    lo_b = np.array([x0 + margin, y0 + margin])
    hi_b = np.array([x1 - margin, y1 - margin])
    lo, hi = pts.min(0), pts.max(0)
    s = min(1.0, float(np.min((hi_b - lo_b) / np.maximum(hi - lo, 1e-9))))
    c = (lo + hi) / 2
    pts = c + (pts - c) * s
    lo, hi = pts.min(0), pts.max(0)
    shift = np.maximum(lo_b - lo, 0.0) + np.minimum(hi_b - hi, 0.0)
    return np.clip(pts + shift, lo_b, hi_b)


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    base = rng.uniform(3, low=0.15, high=0.45)
    img = np.broadcast_to(base[:, None, None], (3, H, W)).copy()
    for _ in range(3):
        theta = rng.uniform(low=0.0, high=np.pi)
        freq = rng.uniform(low=0.05, high=0.3)
        phase = rng.uniform(low=0.0, high=2 * np.pi)
        amp = rng.uniform(3, low=-0.06, high=0.06)
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += amp[:, None, None] * wave
    img += rng.uniform((3, H, W), low=-0.03, high=0.03)
    return img


def _segment_distance(xx, yy, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(xx - (a[0] + t * ab[0]), yy - (a[1] + t * ab[1]))


def disc_radius(image_size):
    return max(1.5, min(image_size) / 24.0)


def render(poses, image_size, rng):
    """Anti-aliased limbs, then one opaque coloured disc per joint."""
    H, W = image_size
    img = _background(rng, H, W)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    width = max(1.0, min(H, W) / 40.0)
    radius = disc_radius(image_size)
    for pts in poses:
        K = len(pts)
        for j in range(1, K):
            d = _segment_distance(xx, yy, pts[PARENTS[j]], pts[j])
            cover = np.clip(width / 2 + 0.5 - d, 0.0, 1.0)
            img = img * (1 - cover) + LIMB_COLOR[:, None, None] * cover
        for j in range(K):
            d = np.hypot(xx - pts[j, 0], yy - pts[j, 1])
            cover = np.clip(radius + 0.5 - d, 0.0, 1.0)
            img = img * (1 - cover) + PALETTE[j][:, None, None] * cover
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def keypoint_bbox(pts, image_size, margin=0.15):
    """Keypoint extent padded by ``margin`` of its size (at least 4 px), clipped to the image."""
    H, W = image_size
    lo, hi = pts.min(0), pts.max(0)
    pad = np.maximum((hi - lo) * margin, 4.0)
    lo = np.maximum(lo - pad, 0.0)
    hi = np.minimum(hi + pad, [W, H])
    return (float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))


def generate_scene(seed, index, cfg: SynthConfig, render_image=True) -> SyntheticScene:
    rng = SplitMix64(scene_seed(seed, index))
    H, W = cfg.image_size
    F = cfg.figures_per_image
    poses = []
    cols = int(np.ceil(np.sqrt(F)))
    rows = int(np.ceil(F / cols))
    for f in range(F):
        r, c = divmod(f, cols)
        region = (c * W / cols, r * H / rows, (c + 1) * W / cols, (r + 1) * H / rows)
        rw, rh = region[2] - region[0], region[3] - region[1]
        scale = min(rw, rh) * rng.uniform(low=0.22, high=0.3)
        center = np.array(
            [
                region[0] + rw * rng.uniform(low=0.4, high=0.6),
                region[1] + rh * rng.uniform(low=0.3, high=0.4),
            ]
        )
        pts = sample_pose(rng, cfg.num_keypoints, center, scale)
        poses.append(_fit_inside(pts, region, margin=disc_radius(cfg.image_size) + 1.0))
    image = render(poses, cfg.image_size, rng) if render_image else None
    instances = [
        PoseInstance(
            image_id=index,
            keypoints=pts,
            visibility=np.full(len(pts), 2.0),
            bbox=keypoint_bbox(pts, cfg.image_size),
        )
        for pts in poses
    ]
    return SyntheticScene(image, instances, seed, index)


def synth_generate(seed, n, cfg: SynthConfig | None = None, render_image=True):
    if n < 1:
        raise ContractViolation("need at least one scene")
    cfg = cfg or SynthConfig()
    return [generate_scene(seed, i, cfg, render_image) for i in range(n)]


# -- top-down crop ---------------------------------------------------------
@dataclass
class CropTransform:
    """Affine map between image pixels and a ``(out_h, out_w)`` patch.

    Coordinates are continuous with pixel ``i`` covering ``[i, i + 1)``.
    ``normalize`` sends the bbox to ``[0, 1]^2``.
    """

    bbox: tuple
    out_size: tuple

    def __post_init__(self):
        x, y, w, h = self.bbox
        if not (w > 0 and h > 0):
            raise ContractViolation(f"degenerate bbox {self.bbox}")

    @property
    def scale(self):
        _, _, w, h = self.bbox
        oh, ow = self.out_size
        return np.array([ow / w, oh / h])

    def to_patch(self, pts):
        return (np.asarray(pts, dtype=np.float64) - np.array(self.bbox[:2])) * self.scale

    def from_patch(self, pts):
        return np.asarray(pts, dtype=np.float64) / self.scale + np.array(self.bbox[:2])

    def normalize(self, pts):
        return self.to_patch(pts) / np.array(self.out_size[::-1], dtype=np.float64)

    def denormalize(self, pts):
        return self.from_patch(np.asarray(pts, dtype=np.float64) * np.array(self.out_size[::-1], dtype=np.float64))


def aspect_bbox(bbox, out_size, expand=1.0):
    """Grow ``bbox`` about its center to the patch aspect ratio, times ``expand``."""
    x, y, w, h = bbox
    oh, ow = out_size
    cx, cy = x + w / 2, y + h / 2
    w, h = w * expand, h * expand
    if w / h > ow / oh:
        h = w * oh / ow
    else:
        w = h * ow / oh
    return (cx - w / 2, cy - h / 2, w, h)


def _bilinear_resample(image, ix, iy):
    """Sample ``[C, H, W]`` at index coordinates with zero padding."""
    C, H, W = image.shape
    x0, y0 = np.floor(ix).astype(int), np.floor(iy).astype(int)
    fx, fy = ix - x0, iy - y0
    out = np.zeros((C,) + ix.shape, dtype=np.float64)
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            w = np.where(ok, wx * wy, 0.0)
            out += image[:, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)] * w
    return out


def crop_resize(image, keypoints, bbox, out_size):
    """Crop ``bbox`` from ``image`` and resize to ``out_size``.

    Returns ``(patch, normalized_keypoints, transform)``; ``transform``
    maps predictions back to image pixels.
    """
    tf = CropTransform(tuple(float(v) for v in bbox), tuple(int(v) for v in out_size))
    oh, ow = tf.out_size
    vv, uu = np.mgrid[0:oh, 0:ow]
    src = tf.from_patch(np.stack([uu + 0.5, vv + 0.5], -1))
    patch = _bilinear_resample(np.asarray(image, dtype=np.float64), src[..., 0] - 0.5, src[..., 1] - 0.5)
    norm = tf.normalize(keypoints) if keypoints is not None else None
    return patch, norm, tf


# -- dataset directories -------------------------------------------------------
def write_dataset(root, seed, n, cfg: SynthConfig | None = None):
    cfg = cfg or SynthConfig()
    os.makedirs(root, exist_ok=True)
    annotations = []
    for i in range(n):
        scene = generate_scene(seed, i, cfg)
        stem = os.path.join(root, f"{i:06d}")
        scene.image.astype("<f4").tofile(stem + ".raw")
        sidecar = {
            "format_version": FORMAT_VERSION,
            "shape": list(scene.image.shape),
            "seed": int(seed),
            "index": i,
            "instances": [inst.to_record() for inst in scene.instances],
        }
        with open(stem + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=1)
        annotations.extend(scene.instances)
    write_jsonl(os.path.join(root, "annotations.jsonl"), annotations)
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": n,
        "num_keypoints": cfg.num_keypoints,
        "image_size": list(cfg.image_size),
        "figures_per_image": cfg.figures_per_image,
        "seed": int(seed),
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"{root}: no manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{root}: dataset format {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    return manifest


def read_dataset(root):
    manifest = read_manifest(root)
    scenes = []
    for i in range(manifest["count"]):
        stem = os.path.join(root, f"{i:06d}")
        with open(stem + ".json") as fh:
            side = json.load(fh)
        image = np.fromfile(stem + ".raw", dtype="<f4").reshape(side["shape"])
        instances = [PoseInstance.from_record(r) for r in side["instances"]]
        scenes.append(SyntheticScene(image, instances, side["seed"], side["index"]))
    return manifest, scenes
