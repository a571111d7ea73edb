"""Binary container for precomputed per-clip features.

SCFS layout, little-endian throughout::

    "SCFS" | version u32 | feature_dim u32 | video_count u64
    per video: id_len u32 | id utf-8 | label i32 | H u32 | W u32 | T u32 | clip_count u32
    per clip:  x y q h w t as f32 | feature_dim x f32

Labels use -1 for "absent". Features and boxes are kept as float32 arrays so a
read followed by a write reproduces the input bytes exactly.
"""

from __future__ import annotations

import collections
import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SCFS"
VERSION = 1
HEADER = struct.Struct("<4sIIQ")
VIDEO_HEADER = struct.Struct("<iIIII")
UNLABELED = -1

# Fixed video geometry of the synthetic generator.
SYNTH_H = SYNTH_W = 224
SYNTH_T = 160
SYNTH_CLIP_FRAMES = 16
EVAL_TEMPORAL = 5
EVAL_SPATIAL = 3


class StoreError(Exception):
    """Base class for feature store failures."""


class BadMagicError(StoreError):
    pass


class BadVersionError(StoreError):
    pass


class TruncatedStoreError(StoreError):
    pass


class StoreInvariantError(StoreError):
    pass


class ImportFormatError(StoreError):
    pass


@dataclass(frozen=True)
class CropBox:
    x: float
    y: float
    q: float
    h: float
    w: float
    t: float

    def fits(self, H: int, W: int, T: int) -> bool:
        return (min(self.x, self.y, self.q) >= 0 and min(self.h, self.w, self.t) > 0
                and self.x + self.h <= H and self.y + self.w <= W and self.q + self.t <= T)


@dataclass(frozen=True)
class ClipRecord:
    coords: CropBox
    feature: np.ndarray


@dataclass
class VideoRecord:
    """One video: crop boxes ``(n, 6)`` as x, y, q, h, w, t and features ``(n, D)``."""

    id: str
    label: int | None
    dims: tuple[int, int, int]
    boxes: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.boxes = np.ascontiguousarray(self.boxes, dtype=np.float32).reshape(-1, 6)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise StoreInvariantError(f"video {self.id!r}: features must be 2-D")
        self.dims = tuple(int(d) for d in self.dims)

    @property
    def clip_count(self) -> int:
        return self.boxes.shape[0]

    @property
    def clips(self) -> list[ClipRecord]:
        return [ClipRecord(CropBox(*map(float, b)), f) for b, f in zip(self.boxes, self.features)]

    def validate(self, feature_dim: int | None = None) -> None:
        H, W, T = self.dims
        n = self.clip_count
        if n < 1:
            raise StoreInvariantError(f"video {self.id!r} has no clips")
        if self.features.shape[0] != n:
            raise StoreInvariantError(f"video {self.id!r}: {n} boxes but {self.features.shape[0]} features")
        if feature_dim is not None and self.features.shape[1] != feature_dim:
            raise StoreInvariantError(
                f"video {self.id!r}: feature dim {self.features.shape[1]} != store dim {feature_dim}")
        if not np.all(np.isfinite(self.features)):
            raise StoreInvariantError(f"video {self.id!r}: non-finite feature values")
        b = self.boxes
        ok = ((b[:, :3] >= 0).all(axis=1) & (b[:, 3:] > 0).all(axis=1)
              & (b[:, 0] + b[:, 3] <= H) & (b[:, 1] + b[:, 4] <= W) & (b[:, 2] + b[:, 5] <= T))
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise StoreInvariantError(
                f"video {self.id!r}: clip {bad} crop {b[bad].tolist()} does not fit dims {self.dims}")


@dataclass
class FeatureStore:
    feature_dim: int
    videos: list[VideoRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def __getitem__(self, i):
        return self.videos[i]

    @property
    def labeled(self) -> bool:
        return bool(self.videos) and all(v.label is not None for v in self.videos)

    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise StoreError("store is not fully labeled")
        return np.array([v.label for v in self.videos], dtype=np.int64)

    def subset(self, indices) -> FeatureStore:
        return FeatureStore(self.feature_dim, [self.videos[i] for i in indices])


def _check_store(videos: list[VideoRecord], feature_dim: int) -> None:
    seen: set[str] = set()
    for v in videos:
        if v.id in seen:
            raise StoreInvariantError(f"duplicate video id {v.id!r}")
        seen.add(v.id)
        v.validate(feature_dim)


def encode_store(videos, feature_dim: int | None = None) -> bytes:
    videos = list(videos.videos if isinstance(videos, FeatureStore) else videos)
    if feature_dim is None:
        if not videos:
            raise StoreInvariantError("feature_dim is required for an empty store")
        feature_dim = videos[0].features.shape[1]
    _check_store(videos, feature_dim)
    parts = [HEADER.pack(MAGIC, VERSION, feature_dim, len(videos))]
    for v in videos:
        raw_id = v.id.encode("utf-8")
        label = UNLABELED if v.label is None else int(v.label)
        parts.append(struct.pack("<I", len(raw_id)))
        parts.append(raw_id)
        parts.append(VIDEO_HEADER.pack(label, *v.dims, v.clip_count))
        body = np.concatenate([v.boxes, v.features], axis=1).astype("<f4", copy=False)
        parts.append(body.tobytes())
    return b"".join(parts)


def write_store(videos, path, feature_dim: int | None = None) -> int:
    """Serialize ``videos`` to ``path``; returns the number of bytes written."""
    if isinstance(videos, FeatureStore) and feature_dim is None:
        feature_dim = videos.feature_dim
    blob = encode_store(videos, feature_dim)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise StoreError(f"cannot write store {path}: {exc}") from exc
    return len(blob)


def decode_store(blob: bytes) -> FeatureStore:
    if len(blob) < HEADER.size:
        raise TruncatedStoreError(f"expected at least {HEADER.size} header bytes, got {len(blob)}")
    magic, version, dim, count = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported store version {version}, expected {VERSION}")
    off = HEADER.size
    row = 6 + dim
    videos = []

    def need(n: int, what: str):
        if off + n > len(blob):
            raise TruncatedStoreError(
                f"truncated {what}: expected length >= {off + n} bytes, actual {len(blob)}")

    for _ in range(count):
        need(4, "video id length")
        (id_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(id_len + VIDEO_HEADER.size, "video header")
        vid = blob[off:off + id_len].decode("utf-8")
        off += id_len
        label, H, W, T, n = VIDEO_HEADER.unpack_from(blob, off)
        off += VIDEO_HEADER.size
        need(4 * row * n, f"clips of video {vid!r}")
        body = np.frombuffer(blob, dtype="<f4", count=row * n, offset=off).reshape(n, row)
        off += 4 * row * n
        videos.append(VideoRecord(vid, None if label == UNLABELED else label, (H, W, T),
                                  body[:, :6].astype(np.float32), body[:, 6:].astype(np.float32)))
    if off != len(blob):
        raise StoreError(f"{len(blob) - off} trailing bytes after {count} videos")
    return FeatureStore(dim, videos)


def read_store(path) -> FeatureStore:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read store {path}: {exc}") from exc
    return decode_store(blob)


def import_delimited(path, dims: tuple[int, int, int], feature_dim: int) -> list[VideoRecord]:
    """Read ``id,label,x,y,q,h,w,t,f_1..f_D`` lines, grouping clips by id.

    An empty label field or -1 means unlabeled.
    """
    expected = 8 + feature_dim
    rows: dict[str, list] = collections.OrderedDict()
    label_line: dict[str, tuple[int | None, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, fields in enumerate(csv.reader(fh), start=1):
            if not fields or (len(fields) == 1 and not fields[0].strip()):
                continue
            if len(fields) != expected:
                raise ImportFormatError(f"line {lineno}: expected {expected} fields, got {len(fields)}")
            vid = fields[0].strip()
            try:
                raw_label = fields[1].strip()
                label = None if raw_label in ("", "-1") else int(raw_label)
                values = [float(v) for v in fields[2:]]
            except ValueError as exc:
                raise ImportFormatError(f"line {lineno}: {exc}") from None
            if vid in label_line and label_line[vid][0] != label:
                prev_label, prev_line = label_line[vid]
                raise ImportFormatError(
                    f"line {lineno}: label {label} for video {vid!r} conflicts with "
                    f"label {prev_label} on line {prev_line}")
            label_line.setdefault(vid, (label, lineno))
            rows.setdefault(vid, []).append((lineno, values))
    videos = []
    for vid, clips in rows.items():
        arr = np.array([c[1] for c in clips], dtype=np.float32)
        video = VideoRecord(vid, label_line[vid][0], dims, arr[:, :6], arr[:, 6:])
        try:
            video.validate(feature_dim)
        except StoreInvariantError as exc:
            raise StoreInvariantError(f"{exc} (first line {clips[0][0]})") from None
        videos.append(video)
    return videos


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    num_classes: int = 10
    train_videos_per_class: int = 200
    eval_videos_per_class: int = 50
    feature_dim: int = 64
    clips_per_train_video: int = 16
    clips_per_eval_video: int = EVAL_TEMPORAL * EVAL_SPATIAL
    base_scale: float = 1.0
    drift_scale: float = 1.0
    noise_scale: float = 0.1

    def validate(self) -> None:
        counts = ("num_classes", "train_videos_per_class", "eval_videos_per_class",
                  "feature_dim", "clips_per_train_video")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.clips_per_eval_video != EVAL_TEMPORAL * EVAL_SPATIAL:
            raise ValueError(f"clips_per_eval_video is fixed to {EVAL_TEMPORAL * EVAL_SPATIAL} (5 temporal x 3 spatial)")
        for name in ("base_scale", "drift_scale", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _train_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    t = SYNTH_CLIP_FRAMES
    q = rng.integers(0, SYNTH_T - t, size=n, endpoint=True)
    h = rng.integers(SYNTH_H // 2, SYNTH_H, size=n, endpoint=True)
    w = rng.integers(SYNTH_W // 2, SYNTH_W, size=n, endpoint=True)
    x = rng.integers(0, SYNTH_H - h, endpoint=True)
    y = rng.integers(0, SYNTH_W - w, endpoint=True)
    return np.stack([x, y, q, h, w, np.full(n, t)], axis=1).astype(np.float32)


def _eval_boxes() -> np.ndarray:
    """5 evenly spaced temporal positions x left/center/right spatial crops."""
    t = SYNTH_CLIP_FRAMES
    side = 3 * SYNTH_H // 4
    x = (SYNTH_H - side) // 2
    ys = [0, (SYNTH_W - side) // 2, SYNTH_W - side]
    qs = np.linspace(0, SYNTH_T - t, EVAL_TEMPORAL).round()
    return np.array([[x, y, q, side, side, t] for q in qs for y in ys], dtype=np.float32)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> tuple[FeatureStore, FeatureStore]:
    """Build seeded (train, eval) stores whose class signal lives in temporal drift.

    Each class owns a unit direction ``u_c``; each video a random base ``z``.
    A clip centred at temporal fraction ``m`` has feature
    ``z + (m - 0.5) * drift_scale * u_c + noise``. A single clip says little
    about the class; the slope of features against ``m`` across a video's
    clips recovers ``u_c``.

    Randomness comes from numpy's PCG64 seeded with ``spec.seed``.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    D = spec.feature_dim
    directions = rng.standard_normal((spec.num_classes, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    eval_boxes = _eval_boxes()

    def make(split: str, per_class: int, boxes_fn) -> FeatureStore:
        videos = []
        for c in range(spec.num_classes):
            for j in range(per_class):
                boxes = boxes_fn()
                n = boxes.shape[0]
                z = spec.base_scale * rng.standard_normal(D)
                m = (boxes[:, 2].astype(np.float64) + boxes[:, 5] / 2) / SYNTH_T
                noise = rng.standard_normal((n, D))
                feats = z + np.outer((m - 0.5) * spec.drift_scale, directions[c]) + spec.noise_scale * noise
                videos.append(VideoRecord(f"{split}-c{c:03d}-v{j:05d}", c, (SYNTH_H, SYNTH_W, SYNTH_T),
                                          boxes, feats.astype(np.float32)))
        return FeatureStore(D, videos)

    train = make("train", spec.train_videos_per_class, lambda: _train_boxes(rng, spec.clips_per_train_video))
    evals = make("eval", spec.eval_videos_per_class, lambda: eval_boxes.copy())
    return train, evals


def store_stats(store: FeatureStore) -> dict:
    videos = store.videos
    stats = {
        "videos": len(videos),
        "clips": int(sum(v.clip_count for v in videos)),
        "feature_dim": store.feature_dim,
        "label_histogram": None,
        "coordinate_ranges": None,
    }
    if videos and all(v.label is not None for v in videos):
        stats["label_histogram"] = dict(sorted(collections.Counter(int(v.label) for v in videos).items()))
    elif not videos:
        stats["label_histogram"] = {}
    if videos:
        boxes = np.concatenate([v.boxes for v in videos])
        stats["coordinate_ranges"] = {
            name: (float(boxes[:, i].min()), float(boxes[:, i].max())) for i, name in enumerate("xyqhwt")}
    return stats
