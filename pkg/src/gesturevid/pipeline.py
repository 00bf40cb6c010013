"""Data path from motion-capture markers to training-ready video segments.

Marker CSV -> per-finger joint angles -> angle peaks -> peak-centered
windows of the (cropped, [0,1]-normalized) frame sequence -> segment files
plus a JSON manifest.  All randomness (the train/test split) is seeded.
"""

import bisect
import csv
import dataclasses
import json
import os

import numpy as np
import scipy.signal

from . import io_ustf
from .errors import ConfigError, DataError

# finger index -> (proximal, joint, distal) marker ids
DEFAULT_FINGER_LAYOUT = {f: (3 * f, 3 * f + 1, 3 * f + 2) for f in range(4)}

MANIFEST_FORMAT = "gesturevid-dataset"
MANIFEST_VERSION = 1

MARKER_HEADER = ["frame", "marker_id", "x_mm", "y_mm", "z_mm"]


@dataclasses.dataclass
class GestureSegment:
    """One extracted window plus its provenance."""

    frames: np.ndarray  # (window, H, W), float
    label: int
    subject: int
    peak_frame: int
    repetition: int


def read_marker_csv(path):
    """-> (sorted frame indices, {marker_id: (T,3) positions with NaN gaps})."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty marker file") from None
        if [h.strip() for h in header] != MARKER_HEADER:
            raise DataError(
                f"{path}: expected header {','.join(MARKER_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1]),
                             float(row[2]), float(row[3]), float(row[4])))
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed marker row {row}") from None
    if not rows:
        raise DataError(f"{path}: no marker rows")
    frames = np.array(sorted({r[0] for r in rows}))
    frame_pos = {int(f): i for i, f in enumerate(frames)}
    marker_ids = sorted({r[1] for r in rows})
    positions = {m: np.full((len(frames), 3), np.nan) for m in marker_ids}
    for f, m, x, y, z in rows:
        positions[m][frame_pos[f]] = (x, y, z)
    return frames, positions


def _fill_gaps(track, marker_id, max_gap=5):
    """Linear interpolation over missing rows, up to max_gap in a run."""
    missing = np.isnan(track).any(axis=1)
    if not missing.any():
        return track
    idx = np.arange(len(track))
    runs = []
    start = None
    for i, m in enumerate(missing):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(track) - 1))
    for lo, hi in runs:
        n = hi - lo + 1
        if lo == 0 or hi == len(track) - 1:
            raise DataError(
                f"marker {marker_id}: missing at the series boundary "
                f"(frames {lo}..{hi}); cannot interpolate")
        if n > max_gap:
            raise DataError(
                f"marker {marker_id}: {n} consecutive frames missing "
                f"(frames {lo}..{hi}), more than the {max_gap}-frame fill limit")
    present = ~missing
    filled = track.copy()
    for col in range(3):
        filled[missing, col] = np.interp(idx[missing], idx[present],
                                         track[present, col])
    return filled


def compute_joint_angles(positions, layout=None, max_gap=5):
    """Interior angle at each joint marker, degrees, shape (T, fingers).

    positions maps marker_id -> (T, 3) array; layout maps finger index ->
    (proximal, joint, distal) marker ids.  angle = arccos of the clamped
    normalized dot product of the two joint-to-neighbor vectors.
    """
    layout = DEFAULT_FINGER_LAYOUT if layout is None else layout
    fingers = sorted(layout)
    lengths = {arr.shape[0] for arr in positions.values()}
    if len(lengths) > 1:
        raise DataError(f"marker tracks have unequal lengths: {sorted(lengths)}")
    out = []
    for f in fingers:
        triple = layout[f]
        for m in triple:
            if m not in positions:
                raise DataError(f"finger {f}: marker {m} absent from the data")
        a, b, c = (_fill_gaps(np.asarray(positions[m], dtype=np.float64), m,
                              max_gap) for m in triple)
        u = a - b
        v = c - b
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        bad = (nu == 0) | (nv == 0)
        if bad.any():
            raise DataError(
                f"finger {f}: zero-length segment vector at frame {int(np.argmax(bad))}")
        cos = np.clip((u * v).sum(axis=1) / (nu * nv), -1.0, 1.0)
        out.append(np.degrees(np.arccos(cos)))
    return np.stack(out, axis=1)


def write_angle_csv(path, angles):
    angles = np.asarray(angles)
    if angles.ndim != 2:
        raise DataError(f"angle table must be 2D (frames, fingers), got {angles.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + [f"finger{i}" for i in range(angles.shape[1])])
        for i, row in enumerate(angles):
            writer.writerow([i] + [f"{v:.6f}" for v in row])
    return path


def detect_peaks(series, min_prominence, min_distance, finger_mask=None):
    """Strict local maxima filtered by prominence and mutual distance.

    2D input (frames, fingers) is reduced to the mean of the masked
    fingers first.  Among candidates closer than min_distance the one with
    higher prominence survives; prominence ties go to the earlier index.
    Returns sorted frame indices.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 2:
        if finger_mask is not None:
            series = series[:, list(finger_mask)]
        series = series.mean(axis=1)
    elif series.ndim != 1:
        raise DataError(f"angle series must be 1D or 2D, got shape {series.shape}")
    if series.size == 0:
        raise DataError("empty angle series")
    if min_distance < 1:
        raise ConfigError(f"min_distance must be >= 1, got {min_distance}")
    if series.size < 3:
        return np.empty(0, dtype=int)
    inner = series[1:-1]
    cand = np.nonzero((inner > series[:-2]) & (inner > series[2:]))[0] + 1
    if cand.size == 0:
        return np.empty(0, dtype=int)
    prom = scipy.signal.peak_prominences(series, cand)[0]
    keep = prom >= min_prominence
    cand, prom = cand[keep], prom[keep]
    if cand.size == 0:
        return np.empty(0, dtype=int)
    order = np.lexsort((cand, -prom))
    chosen = []  # kept sorted for the nearest-neighbor distance test
    for i in order:
        p = int(cand[i])
        at = bisect.bisect_left(chosen, p)
        left_ok = at == 0 or p - chosen[at - 1] >= min_distance
        right_ok = at == len(chosen) or chosen[at] - p >= min_distance
        if left_ok and right_ok:
            chosen.insert(at, p)
    return np.array(chosen, dtype=int)


def extract_segments(frames, peaks, window, prominences=None, label=0, subject=0):
    """Peak-centered windows [p - window//2, p + ceil(window/2) - 1].

    Windows that cross the sequence bounds are dropped.  Overlapping
    windows are resolved greedily: higher prominence first, earlier peak on
    ties.  Repetition indices number the surviving segments in time order.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DataError(f"frame stack must be (T,H,W), got shape {frames.shape}")
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    peaks = np.asarray(peaks, dtype=int).reshape(-1)
    if prominences is None:
        prominences = np.zeros(peaks.shape)
    prominences = np.asarray(prominences, dtype=np.float64).reshape(-1)
    if prominences.shape != peaks.shape:
        raise DataError("peaks and prominences must align")
    t_total = frames.shape[0]
    half = window // 2
    spans = []
    for p, pr in zip(peaks, prominences):
        start = int(p) - half
        end = start + window
        if start < 0 or end > t_total:
            continue
        spans.append((start, end, int(p), float(pr)))
    spans.sort(key=lambda s: (-s[3], s[2]))
    taken = []
    for start, end, p, _ in spans:
        if any(start < e and s < end for s, e, _p in taken):
            continue
        taken.append((start, end, p))
    taken.sort(key=lambda s: s[2])
    return [GestureSegment(frames=frames[s:e].copy(), label=int(label),
                           subject=int(subject), peak_frame=p, repetition=rep)
            for rep, (s, e, p) in enumerate(taken)]


def crop_and_normalize(frames, target=(224, 224), offset=None):
    """Fixed-window crop then per-sequence min-max rescale to [0, 1].

    Default offset centers the crop; a constant sequence maps to all zeros.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DataError(f"frame stack must be (T,H,W), got shape {frames.shape}")
    th, tw = int(target[0]), int(target[1])
    _, h, w = frames.shape
    if th > h or tw > w:
        raise DataError(f"crop target {th}x{tw} exceeds source {h}x{w}")
    if offset is None:
        offset = ((h - th) // 2, (w - tw) // 2)
    r0, c0 = int(offset[0]), int(offset[1])
    if r0 < 0 or c0 < 0 or r0 + th > h or c0 + tw > w:
        raise DataError(f"crop offset {offset} puts {th}x{tw} outside {h}x{w}")
    out = frames[:, r0:r0 + th, c0:c0 + tw].astype(np.float32)
    lo = float(out.min())
    hi = float(out.max())
    if hi == lo:
        return np.zeros_like(out)
    return (out - lo) / np.float32(hi - lo)


def split_dataset(segments, train_fraction=0.8, seed=0):
    """Deterministic stratified split over (subject, label) groups."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0,1), got {train_fraction}")
    groups = {}
    for seg in segments:
        groups.setdefault((seg.subject, seg.label), []).append(seg)
    if not groups:
        raise DataError("no segments to split")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for key in sorted(groups):
        members = groups[key]
        n = len(members)
        if n < 2:
            raise DataError(
                f"subject {key[0]} label {key[1]} has {n} segment(s); "
                "need at least 2 to split")
        n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
        order = rng.permutation(n)
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).append(members[idx])
    return train, test


def write_dataset(out_dir, segments, window, extra=None):
    """Segments as USTF files plus a manifest JSON; returns manifest path."""
    segments = list(segments)
    for seg in segments:
        if seg.frames.shape[0] != window:
            raise DataError(
                f"segment at peak {seg.peak_frame} has {seg.frames.shape[0]} "
                f"frames, expected {window}")
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                "window": int(window), "segments": []}
    if extra:
        manifest.update(extra)
    for i, seg in enumerate(segments):
        fname = f"seg{i:05d}.ustf"
        io_ustf.write_tensor(os.path.join(out_dir, fname),
                             np.ascontiguousarray(seg.frames, dtype=np.float32))
        manifest["segments"].append({
            "file": fname, "label": int(seg.label), "subject": int(seg.subject),
            "peak_frame": int(seg.peak_frame), "repetition": int(seg.repetition)})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def append_dataset(out_dir, segments, window):
    """Add segments to an existing dataset directory, or create one.

    File numbering continues from the manifest already present, so repeated
    segment invocations (one per subject/gesture recording) accumulate into
    a single dataset.
    """
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.isfile(path):
        return write_dataset(out_dir, segments, window)
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a dataset manifest")
    if int(manifest["window"]) != int(window):
        raise DataError(
            f"{path}: existing window {manifest['window']} != {window}")
    start = len(manifest["segments"])
    for i, seg in enumerate(segments):
        if seg.frames.shape[0] != window:
            raise DataError(
                f"segment at peak {seg.peak_frame} has {seg.frames.shape[0]} "
                f"frames, expected {window}")
        fname = f"seg{start + i:05d}.ustf"
        io_ustf.write_tensor(os.path.join(out_dir, fname),
                             np.ascontiguousarray(seg.frames, dtype=np.float32))
        manifest["segments"].append({
            "file": fname, "label": int(seg.label), "subject": int(seg.subject),
            "peak_frame": int(seg.peak_frame), "repetition": int(seg.repetition)})
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(manifest_path):
    """-> (segments with frames loaded, window)."""
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{manifest_path}: not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{manifest_path}: unsupported manifest version")
    window = int(manifest["window"])
    base = os.path.dirname(os.path.abspath(manifest_path))
    segments = []
    for entry in manifest["segments"]:
        frames = io_ustf.read_tensor(os.path.join(base, entry["file"]))
        if frames.ndim != 3 or frames.shape[0] != window:
            raise DataError(
                f"{entry['file']}: shape {frames.shape} does not match "
                f"window {window}")
        segments.append(GestureSegment(
            frames=frames, label=int(entry["label"]), subject=int(entry["subject"]),
            peak_frame=int(entry["peak_frame"]), repetition=int(entry["repetition"])))
    if not segments:
        raise DataError(f"{manifest_path}: dataset is empty")
    return segments, window


def segment_overlap_free(segments):
    """True when no two segments from one (subject, label) share frames."""
    by_source = {}
    for seg in segments:
        w = seg.frames.shape[0]
        start = seg.peak_frame - w // 2
        by_source.setdefault((seg.subject, seg.label), []).append((start, start + w))
    for spans in by_source.values():
        spans.sort()
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            if s2 < e1:
                return False
    return True


def angle_stats(angles):
    """Small summary used by the segment CLI verb."""
    angles = np.asarray(angles)
    return {"frames": int(angles.shape[0]),
            "fingers": int(angles.shape[1]) if angles.ndim == 2 else 1,
            "min_deg": float(angles.min()),
            "max_deg": float(angles.max()),
            "mean_deg": float(angles.mean())}
