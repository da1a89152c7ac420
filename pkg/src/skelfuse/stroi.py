"""Spatial-temporal region-of-interest grids.

A grid tiles body-part crops: row j holds part j, column l holds the
l-th of L time samples, every patch is P x P pixels, so the image is
(K*P) x (L*P).  Two-subject samples split each column in half, left
subject then right subject, preserving the square outer size.  Part
weights from the skeleton branch multiply whole row-blocks; in soft
attention mode that multiplication sits on the tape so gradients reach
the graph network.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .errors import DataError, ShapeError, UsageError
from .graph import SkeletonTemplate
from .tensor import Tensor

Float = np.float32


@dataclass
class JointTrack:
    """Per-frame pixel positions [T,M,2] plus detection confidence [T,M]."""

    pixels: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=Float)
        self.confidence = np.asarray(self.confidence, dtype=Float)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 2 \
                or self.confidence.shape != self.pixels.shape[:2]:
            raise DataError(f"bad track shapes {self.pixels.shape} / {self.confidence.shape}")


@dataclass
class StRoiGrid:
    """[3, K*P, L*P] float image in [0,1] plus its layout."""

    image: np.ndarray
    k_roi: int
    l_samples: int
    patch: int
    subject_count: int = 1

    def __post_init__(self):
        expect = (3, self.k_roi * self.patch, self.l_samples * self.patch)
        if tuple(self.image.shape) != expect:
            raise ShapeError("StRoiGrid", self.image.shape, expect)


@dataclass
class WeightedStRoi:
    image: np.ndarray
    weights_used: np.ndarray


def temporal_sample_indices(total: int, samples: int) -> list[int]:
    """Centers of `samples` equal bins over [0, total), clamped.

    Computed in exact integer arithmetic: index_l = floor((2l-1)*T / 2L).
    Monotone non-decreasing; all distinct once total >= samples.
    """
    if total < 1 or samples < 1:
        raise UsageError(f"need total >= 1 and samples >= 1, got {total}, {samples}")
    return [min(((2 * l - 1) * total) // (2 * samples), total - 1)
            for l in range(1, samples + 1)]


def jittered_sample_indices(total: int, samples: int, rng) -> list[int]:
    """Random frame within each bin instead of its center (the optional
    random-frame-selection augmentation)."""
    if total < 1 or samples < 1:
        raise UsageError(f"need total >= 1 and samples >= 1, got {total}, {samples}")
    out = []
    for l in range(samples):
        lo = (l * total) // samples
        hi = max(((l + 1) * total) // samples, lo + 1)
        out.append(min(int(rng.integers(lo, hi)), total - 1))
    return out


def _to_float_image(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame.astype(Float) / Float(255.0)
    return frame.astype(Float)


def _crop_rect(frame: np.ndarray, center, height: int, width: int) -> np.ndarray:
    """Axis-aligned crop with zero fill outside the frame; [h,w,3] float."""
    fh, fw = frame.shape[:2]
    cx = int(np.floor(center[0] + 0.5))  # round half up, stable for .5 centers
    cy = int(np.floor(center[1] + 0.5))
    x0 = cx - width // 2
    y0 = cy - height // 2
    out = np.zeros((height, width, 3), dtype=Float)
    sy0, sy1 = max(0, y0), min(fh, y0 + height)
    sx0, sx1 = max(0, x0), min(fw, x0 + width)
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = _to_float_image(frame[sy0:sy1, sx0:sx1])
    return out


def crop_patch(frame: np.ndarray, center, patch: int,
               confidence: float = 1.0) -> np.ndarray:
    """P x P crop centered on a joint; zero patch for missing detections."""
    if patch < 1:
        raise UsageError(f"patch side must be >= 1, got {patch}")
    if confidence <= 0:
        return np.zeros((patch, patch, 3), dtype=Float)
    return _crop_rect(frame, center, patch, patch)


def assemble_stroi(frames: np.ndarray, tracks, template: SkeletonTemplate,
                   k_roi: int, l_samples: int, patch: int,
                   sample_indices=None, subjects: int | None = None) -> StRoiGrid:
    """Tile part crops into the square grid.

    `tracks` is one JointTrack or a list of one or two (two-subject
    layout: half-width patches, subjects side by side).  `subjects`
    forces the layout; passing 2 with a single track leaves the second
    half black (a missing second performer).  `sample_indices` overrides
    the bin-center time sampling (used by the frame-jitter augmentation).
    """
    if isinstance(tracks, JointTrack):
        tracks = [tracks]
    parts = template.parts
    if k_roi != len(parts):
        raise UsageError(f"template defines {len(parts)} parts, config says {k_roi}")
    for _, j in parts:
        if j >= template.joint_count:
            raise DataError(f"part joint {j} out of range")
    t_total = frames.shape[0]
    for track in tracks:
        if track.pixels.shape[0] != t_total:
            raise DataError("track length does not match frame count")
    subject_count = subjects if subjects is not None else len(tracks)
    if subject_count not in (1, 2) or len(tracks) > subject_count:
        raise DataError(f"expected 1 or 2 subjects, got {len(tracks)} tracks "
                        f"for a {subject_count}-subject layout")
    if subject_count == 2 and patch % 2 != 0:
        raise UsageError("two-subject layout needs an even patch size")

    image = np.zeros((3, k_roi * patch, l_samples * patch), dtype=Float)
    indices = sample_indices if sample_indices is not None \
        else temporal_sample_indices(t_total, l_samples)
    if len(indices) != l_samples:
        raise UsageError(f"need {l_samples} sample indices, got {len(indices)}")
    width = patch if subject_count == 1 else patch // 2
    for s, track in enumerate(tracks):
        col0 = s * l_samples * width
        for j, (_, joint) in enumerate(parts):
            for l, ti in enumerate(indices):
                conf = float(track.confidence[ti, joint])
                if conf <= 0:
                    continue
                block = _crop_rect(frames[ti], track.pixels[ti, joint], patch, width)
                image[:, j * patch:(j + 1) * patch,
                      col0 + l * width:col0 + (l + 1) * width] = block.transpose(2, 0, 1)
    return StRoiGrid(image=image, k_roi=k_roi, l_samples=l_samples, patch=patch,
                     subject_count=subject_count)


def map_vertex_weights_to_parts(weights, template: SkeletonTemplate):
    """Select the part joints' weights and rescale so the max is 1.

    All-zero weights fall back to all ones (no evidence, no attenuation).
    Accepts an array (returns an array) or a taped Tensor (returns a
    Tensor; the max is treated as a constant so gradients flow through
    the selected weights).
    """
    idx = template.part_joints
    if isinstance(weights, Tensor):
        picked = tn.take(weights, idx)
        top = float(picked.data.max())
        if top <= 0:
            return Tensor(np.ones(len(idx), dtype=Float))
        return tn.scale(picked, 1.0 / top)
    picked = np.asarray(weights, dtype=Float)[idx]
    top = picked.max()
    if top <= 0:
        return np.ones(len(idx), dtype=Float)
    return picked / top


def _row_factors(part_weights: np.ndarray, grid: StRoiGrid) -> np.ndarray:
    """Per-pixel-row multiplier [K*P] from part weights [K] or [S,K]."""
    pw = np.asarray(part_weights, dtype=Float)
    if pw.ndim == 1:
        return np.repeat(pw, grid.patch)
    if pw.shape != (grid.subject_count, grid.k_roi):
        raise ShapeError("apply_joint_weights", pw.shape, (grid.subject_count, grid.k_roi))
    return np.stack([np.repeat(pw[s], grid.patch) for s in range(pw.shape[0])])


def apply_joint_weights(grid: StRoiGrid, part_weights) -> WeightedStRoi:
    """Multiply every pixel of row-block j by part weight j.

    Two-subject grids accept a [2,K] weight matrix applied to the left
    and right halves.
    """
    pw = np.asarray(part_weights, dtype=Float)
    if pw.ndim == 1 and pw.shape[0] != grid.k_roi:
        raise ShapeError("apply_joint_weights", pw.shape, (grid.k_roi,))
    if np.any(pw < 0):
        raise UsageError("negative part weights violate the JointWeights invariant")
    rows = _row_factors(pw, grid)
    if rows.ndim == 1:
        image = grid.image * rows[None, :, None]
    else:
        half = grid.image.shape[2] // 2
        image = grid.image.copy()
        image[:, :, :half] *= rows[0][None, :, None]
        image[:, :, half:] *= rows[1][None, :, None]
    return WeightedStRoi(image=image, weights_used=pw)


@lru_cache(maxsize=16)
def _part_masks_flat(k_roi: int, l_samples: int, patch: int) -> np.ndarray:
    """[K, 3*K*P*L*P] one-hot block masks used by the taped weighting."""
    h, w = k_roi * patch, l_samples * patch
    masks = np.zeros((k_roi, 3, h, w), dtype=Float)
    for j in range(k_roi):
        masks[j, :, j * patch:(j + 1) * patch, :] = 1.0
    return masks.reshape(k_roi, 3 * h * w)


def weight_grid_batch(grids: Tensor, part_weights: Tensor, patch: int) -> Tensor:
    """Taped row-block weighting of a [N,3,H,W] batch by [N,K] weights.

    Built from matmul against constant one-hot block masks, so the
    gradient w.r.t. the part weights comes for free.
    """
    n, c, h, w = grids.shape
    k = part_weights.shape[1]
    masks = Tensor(_part_masks_flat(k, w // patch, patch))
    wmap = tn.reshape(tn.matmul(part_weights, masks), (n, c, h, w))
    return tn.mul(grids, wmap)


@lru_cache(maxsize=32)
def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Bilinear interpolation matrix [dst, src] with half-pixel centers."""
    mat = np.zeros((dst, src), dtype=Float)
    for i in range(dst):
        pos = (i + 0.5) * src / dst - 0.5
        i0 = int(np.floor(pos))
        frac = pos - i0
        a = min(max(i0, 0), src - 1)
        b = min(max(i0 + 1, 0), src - 1)
        mat[i, a] += Float(1.0 - frac)
        mat[i, b] += Float(frac)
    return mat


def resize_bilinear(image, side: int):
    """Half-pixel-center bilinear resize of [...,H,W] to [...,side,side]."""
    h, w = (image.shape[-2], image.shape[-1])
    ry, rx = _resize_matrix(h, side), _resize_matrix(w, side)
    if isinstance(image, Tensor):
        return tn.separable_linear(image, Tensor(ry), Tensor(rx))
    return np.matmul(ry, np.matmul(np.asarray(image, dtype=Float), rx.T))


def compute_channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a [N,3,H,W] training batch (std floored)."""
    mean = images.mean(axis=(0, 2, 3)).astype(Float)
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6).astype(Float)
    return mean, std


def preprocess_for_net(image, side: int, stats=None):
    """Resize to side x side and standardize with dataset statistics.

    Accepts [3,H,W] or [N,3,H,W], arrays or taped Tensors.
    """
    resized = resize_bilinear(image, side)
    if stats is None:
        return resized
    mean, std = stats
    if isinstance(resized, Tensor):
        return tn.channel_standardize(resized, mean, std)
    return (resized - mean.reshape(3, 1, 1)) / std.reshape(3, 1, 1)
