"""Synthetic gesture-video datasets with controllable separability.

spatial mode: each class is a static Gaussian blob at a class-specific
location, so a single frame suffices to classify.  temporal_only mode: all
classes share the identical multiset of frames (a bright horizontal band at
`frames` distinct heights); classes differ only in the playback order, and
a random cyclic phase per sample makes every single-frame marginal (center
frame included) class-independent by construction.  mixed splits the
classes over the two recipes.
"""

import dataclasses
import math

import numpy as np

from . import pipeline
from .errors import ConfigError

MODES = ("spatial", "temporal_only", "mixed")


@dataclasses.dataclass
class SynthConfig:
    num_classes: int = 12
    samples_per_class: int = 20
    frames: int = 16
    height: int = 64
    width: int = 64
    mode: str = "spatial"
    noise_sigma: float = 0.05
    seed: int = 0
    subjects: int = 3

    def __post_init__(self):
        for field in ("num_classes", "samples_per_class", "frames",
                      "height", "width", "subjects"):
            value = int(getattr(self, field))
            if value < 1:
                raise ConfigError(f"{field} must be >= 1, got {value}")
            setattr(self, field, value)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.noise_sigma = float(self.noise_sigma)
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        self.seed = int(self.seed)

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)


def blob_centers(num_classes, height, width):
    """Class blob centers on a grid; errors when the grid would not fit."""
    cols = math.ceil(math.sqrt(num_classes))
    rows = math.ceil(num_classes / cols)
    if height < 4 * rows or width < 4 * cols:
        raise ConfigError(
            f"frame size {height}x{width} too small to place {num_classes} "
            "distinct patterns")
    centers = []
    for k in range(num_classes):
        r, c = divmod(k, cols)
        centers.append(((r + 0.5) * height / rows, (c + 0.5) * width / cols))
    return centers


def band_frames(frames, height, width):
    """The canonical frame set: one horizontal band per frame slot."""
    sigma = max(1.0, height / (3.0 * frames))
    ys = np.arange(height, dtype=np.float64)
    out = np.zeros((frames, height, width), dtype=np.float64)
    for j in range(frames):
        row = (j + 0.5) * height / frames
        out[j] = np.exp(-((ys - row) ** 2) / (2 * sigma * sigma))[:, None]
    return out


def _zigzag(n):
    order, lo, hi = [], 0, n - 1
    while lo <= hi:
        order.append(lo)
        if hi != lo:
            order.append(hi)
        lo += 1
        hi -= 1
    return order


def _rotation_equal(a, b):
    n = len(a)
    return any(all(a[(t + c) % n] == b[t] for t in range(n)) for c in range(n))


def temporal_orderings(num_classes, frames):
    """Frame-playback orders, pairwise distinct under cyclic time shifts.

    Affine orders t -> v*t mod frames for v coprime with frames, then a few
    structured non-affine ones.  Distinctness is verified, not assumed.
    """
    if frames < 2:
        raise ConfigError("temporal classes need at least 2 frames")
    orders = [[(v * t) % frames for t in range(frames)]
              for v in range(1, frames) if math.gcd(v, frames) == 1]
    zig = _zigzag(frames)
    evens = list(range(0, frames, 2)) + list(range(1, frames, 2))
    extras = [zig, list(reversed(zig)), evens,
              list(range(1, frames, 2)) + list(range(0, frames, 2))[::-1]]
    for cand in extras:
        if sorted(cand) != list(range(frames)):
            continue
        if not any(_rotation_equal(cand, o) for o in orders):
            orders.append(cand)
    if len(orders) < num_classes:
        raise ConfigError(
            f"{frames} frames admit only {len(orders)} distinct temporal "
            f"orders, fewer than {num_classes} classes")
    for i in range(num_classes):
        for j in range(i + 1, num_classes):
            if _rotation_equal(orders[i], orders[j]):
                raise ConfigError("temporal orderings collide; internal error")
    return [np.array(o, dtype=int) for o in orders[:num_classes]]


def _spatial_video(rng, center, cfg):
    cy, cx = center
    cy += rng.integers(-2, 3)
    cx += rng.integers(-2, 3)
    cols = math.ceil(math.sqrt(cfg.num_classes))
    rows = math.ceil(cfg.num_classes / cols)
    sigma = max(1.5, min(cfg.height / rows, cfg.width / cols) / 5.0)
    ys = np.arange(cfg.height, dtype=np.float64)[:, None]
    xs = np.arange(cfg.width, dtype=np.float64)[None, :]
    frame = np.exp(-(((ys - cy) ** 2) + ((xs - cx) ** 2)) / (2 * sigma * sigma))
    return np.broadcast_to(frame, (cfg.frames, cfg.height, cfg.width)).copy()


def _temporal_video(rng, bands, order, cfg):
    phase = int(rng.integers(cfg.frames))
    idx = order[(np.arange(cfg.frames) + phase) % cfg.frames]
    return bands[idx].copy()


def generate(config: SynthConfig, out_dir):
    """Write the synthetic dataset; returns the manifest path."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    k = cfg.num_classes
    if cfg.mode == "spatial":
        spatial_classes = list(range(k))
    elif cfg.mode == "temporal_only":
        spatial_classes = []
    else:
        spatial_classes = list(range(k // 2))
    temporal_classes = [c for c in range(k) if c not in spatial_classes]
    centers = blob_centers(k, cfg.height, cfg.width) if spatial_classes else None
    if temporal_classes:
        bands = band_frames(cfg.frames, cfg.height, cfg.width)
        orders = temporal_orderings(len(temporal_classes), cfg.frames)
        order_of = dict(zip(temporal_classes, orders))
    segments = []
    for label in range(k):
        for rep in range(cfg.samples_per_class):
            if label in spatial_classes:
                video = _spatial_video(rng, centers[label], cfg)
            else:
                video = _temporal_video(rng, bands, order_of[label], cfg)
            if cfg.noise_sigma > 0:
                video = video + rng.normal(0.0, cfg.noise_sigma, video.shape)
                video = np.clip(video, 0.0, 1.0)
            segments.append(pipeline.GestureSegment(
                frames=video.astype(np.float32),
                label=label,
                subject=rep % cfg.subjects,
                peak_frame=1000 + rep * 2 * cfg.frames,
                repetition=rep))
    return pipeline.write_dataset(out_dir, segments, cfg.frames,
                                  extra={"synth": cfg.to_json()})
