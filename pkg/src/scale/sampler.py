"""Training batch assembly: two disjoint views per video plus mask plans."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .featurestore import FeatureStore, VideoRecord


class SamplingError(ValueError):
    pass


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def mask_count(K: int, ratio: float) -> int:
    return max(1, round_half_away(ratio * K))


@dataclass(frozen=True)
class ViewPair:
    set1: np.ndarray
    set2: np.ndarray


@dataclass(frozen=True)
class MaskPlan:
    """Masked positions (indices into 0..K-1) of each view."""

    m1: np.ndarray
    m2: np.ndarray


@dataclass(frozen=True)
class BatchSpec:
    B: int = 64
    K: int = 8
    mask_ratio: float = 0.25

    def validate(self) -> None:
        if self.B < 2:
            raise SamplingError("batch size must be >= 2 for contrastive losses")
        if self.K < 1:
            raise SamplingError("K must be >= 1")
        if not 0 < self.mask_ratio < 1:
            raise SamplingError("mask ratio must lie in (0, 1)")


@dataclass
class PackedBatch:
    """Model inputs for B videos x 2 views x K clips.

    ``features`` is (B, 2, K, D), ``coords`` is (B, 2, K, 6) and ``mask`` is a
    boolean (B, 2, K) array.
    """

    features: np.ndarray
    coords: np.ndarray
    mask: np.ndarray
    video_ids: list[str]


def split_views(video: VideoRecord, K: int, rng: np.random.Generator) -> ViewPair:
    n = video.clip_count
    if 2 * K > n:
        raise SamplingError(f"video {video.id!r} has {n} clips; two views of K={K} need {2 * K}")
    perm = rng.permutation(n)
    return ViewPair(perm[:K], perm[K:2 * K])


def choose_masks(K: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0 < ratio < 1:
        raise SamplingError("mask ratio must lie in (0, 1)")
    m = mask_count(K, ratio)
    return MaskPlan(np.sort(rng.choice(K, m, replace=False)), np.sort(rng.choice(K, m, replace=False)))


def normalize_coords(boxes: np.ndarray, dims) -> np.ndarray:
    """Map x, y, q, h, w, t boxes to [x/H, y/W, q/T, (x+h)/H, (y+w)/W, (q+t)/T]."""
    H, W, T = dims
    b = np.asarray(boxes, dtype=np.float64)
    scale = np.array([H, W, T], dtype=np.float64)
    return np.concatenate([b[..., :3] / scale, (b[..., :3] + b[..., 3:]) / scale], axis=-1)


def assemble_batch(store: FeatureStore, video_indices, spec: BatchSpec,
                   rng: np.random.Generator) -> PackedBatch:
    K = spec.K
    feats, coords, masks, ids = [], [], [], []
    for vi in video_indices:
        video = store.videos[vi]
        views = split_views(video, K, rng)
        plan = choose_masks(K, spec.mask_ratio, rng)
        idx = np.stack([views.set1, views.set2])
        feats.append(video.features[idx])
        coords.append(normalize_coords(video.boxes[idx], video.dims))
        m = np.zeros((2, K), dtype=bool)
        m[0, plan.m1] = True
        m[1, plan.m2] = True
        masks.append(m)
        ids.append(video.id)
    return PackedBatch(np.stack(feats), np.stack(coords), np.stack(masks), ids)


def epoch_batches(n_videos: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle video indices and cut them into batches; a final batch of 1 is dropped."""
    order = rng.permutation(n_videos)
    batches = [order[i:i + batch_size] for i in range(0, n_videos, batch_size)]
    return [b for b in batches if len(b) >= 2]
