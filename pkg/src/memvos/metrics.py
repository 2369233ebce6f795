"""Region similarity J, contour accuracy F, and the combined J&F score.

J is plain intersection-over-union on the object's binary mask. F extracts
boundaries (an object pixel with a 4-neighbour outside the object; the image
border counts as outside), dilates the opposing boundary by a Euclidean disk
of the tolerance radius, and returns the harmonic mean of boundary
precision/recall. Both follow the established video-segmentation benchmark
conventions; the disappearance policy is ours and configurable (see
`score_frame`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ValidationError


@dataclass(frozen=True)
class FrameScore:
    object_id: int
    frame_index: int
    j: float
    f: float

    def __post_init__(self):
        if not (0.0 <= self.j <= 1.0 and 0.0 <= self.f <= 1.0):
            raise ValidationError(f"scores outside [0,1]: j={self.j} f={self.f}")


@dataclass(frozen=True)
class SequenceScore:
    mean_j: float
    mean_f: float
    jf: float  # exactly the midpoint of mean_j and mean_f


def _binary(mask: np.ndarray, object_id: int) -> np.ndarray:
    return np.asarray(mask) == object_id


def _check_dims(pred, gt):
    if np.asarray(pred).shape != np.asarray(gt).shape:
        raise ValidationError(
            f"mask dimensions differ: {np.asarray(pred).shape} vs "
            f"{np.asarray(gt).shape}")


def region_similarity(pred, gt, object_id: int) -> float:
    """Intersection over union of the object's region; 1.0 when both empty."""
    _check_dims(pred, gt)
    p, g = _binary(pred, object_id), _binary(gt, object_id)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary_map(binary: np.ndarray) -> np.ndarray:
    """Object pixels with at least one 4-neighbour outside the object.

    Pixels on the image border are boundary whenever they belong to the
    object (outside the image counts as background)."""
    b = np.asarray(binary, dtype=bool)
    inner = np.zeros_like(b)
    inner[1:-1, 1:-1] = (b[:-2, 1:-1] & b[2:, 1:-1]
                         & b[1:-1, :-2] & b[1:-1, 2:])
    return b & ~inner


def default_tolerance(height: int, width: int) -> int:
    """Boundary match radius: 0.8% of the image diagonal, rounded up."""
    return int(math.ceil(0.008 * math.hypot(height, width)))


def contour_accuracy(pred, gt, object_id: int, tolerance: int | None = None
                     ) -> float:
    """Boundary F-measure at the given pixel tolerance radius."""
    _check_dims(pred, gt)
    if tolerance is None:
        tolerance = default_tolerance(*np.asarray(gt).shape)
    if tolerance < 0:
        raise ValidationError("tolerance radius must be >= 0")
    pb = boundary_map(_binary(pred, object_id))
    gb = boundary_map(_binary(gt, object_id))
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    gb_wide = kernels.dilate_disk(gb, int(tolerance))
    pb_wide = kernels.dilate_disk(pb, int(tolerance))
    precision = np.count_nonzero(pb & gb_wide) / n_p
    recall = np.count_nonzero(gb & pb_wide) / n_g
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def score_frame(pred, gt, object_id: int, frame_index: int,
                tolerance: int | None = None,
                reward_correct_absence: bool = True) -> FrameScore:
    """Score one predicted frame against groundtruth.

    Long videos contain real disappearances, so a frame where the object is
    absent from groundtruth scores (1, 1) if the prediction is also empty and
    (0, 0) otherwise. Set reward_correct_absence=False to fall back to the
    raw J/F values instead.
    """
    _check_dims(pred, gt)
    gt_empty = not _binary(gt, object_id).any()
    if gt_empty and reward_correct_absence:
        ok = not _binary(pred, object_id).any()
        v = 1.0 if ok else 0.0
        return FrameScore(object_id, frame_index, v, v)
    return FrameScore(object_id, frame_index,
                      region_similarity(pred, gt, object_id),
                      contour_accuracy(pred, gt, object_id, tolerance))


def sequence_score(frames: list[FrameScore]) -> SequenceScore:
    """Mean J and F over the scored frames; the headline score is their
    midpoint."""
    if not frames:
        raise ValidationError("cannot aggregate an empty score list")
    mj = float(np.mean([s.j for s in frames]))
    mf = float(np.mean([s.f for s in frames]))
    return SequenceScore(mj, mf, (mj + mf) / 2.0)
