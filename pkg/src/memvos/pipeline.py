"""Semi-automatic annotation pipeline over pluggable model interfaces.

Four steps per sequence and object:

  1. sparse automatic segmentation at 1 FPS: a box tracker follows the
     object from its first-appearance box, an instance segmenter proposes
     candidate masks, and the candidate with the highest box overlap wins
  2. correction round on the sparse masks (flag -> export queue -> apply
     externally produced fixes)
  3. propagation of the sparse anchors to every frame with a video
     segmentation model (this package's own model is the default propagator)
  4. correction round on the dense masks

Plugins are in-process call contracts (see the Protocol classes); a
SubprocessPropagator is provided as the documented file-exchange fallback
(frames in, masks out via files). Plugin calls are treated as fallible:
failures flag the frame and the pipeline continues.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import Mask, SequenceRecord, load_mask, save_mask, frame_name
from .errors import FormatError, ValidationError
from .metrics import region_similarity
from .model import SegModel, init_object_memories, segment_frame
from .modes import Box

SPARSE_ROUND = "sparse-1fps"
DENSE_ROUND = "dense-6fps"
IOU_DROP_THRESHOLD = 0.5
AREA_SPIKE_RATIO = 2.5


# ---------------------------------------------------------------------------
# plugin contracts

class InstanceSegmenter(Protocol):
    def segment(self, image: np.ndarray, frame_index: int
                ) -> list[np.ndarray]:
        """Candidate binary masks for one frame. Real segmenters work from
        the image alone; the index is there for test stubs and caches."""


class BoxTracker(Protocol):
    def track(self, record: SequenceRecord, first_index: int,
              first_box: Box, frame_indices: list[int]) -> dict[int, Box | None]:
        """Per-frame boxes for the tracked object (None = lost)."""


class MaskPropagator(Protocol):
    def propagate(self, record: SequenceRecord, anchor_index: int,
                  anchor_mask: np.ndarray,
                  target_indices: list[int]) -> dict[int, np.ndarray]:
        """Binary masks for the target frames, seeded at the anchor."""


# stub plugins (groundtruth passthrough); used for end-to-end identity tests

class IdentitySegmenter:
    def __init__(self, record: SequenceRecord):
        self.record = record

    def segment(self, image: np.ndarray, frame_index: int
                ) -> list[np.ndarray]:
        gt = self.record.groundtruth[frame_index]
        return [(gt == oid) for oid in self.record.object_ids
                if (gt == oid).any()]


class IdentityTracker:
    def __init__(self, record: SequenceRecord, object_id: int):
        self.record = record
        self.object_id = object_id

    def track(self, record, first_index, first_box, frame_indices):
        out = {}
        for t in frame_indices:
            out[t] = Box.from_mask(record.groundtruth[t] == self.object_id)
        return out


class IdentityPropagator:
    def __init__(self, record: SequenceRecord, object_id: int):
        self.record = record
        self.object_id = object_id

    def propagate(self, record, anchor_index, anchor_mask, target_indices):
        return {t: (record.groundtruth[t] == self.object_id)
                for t in target_indices}


class ModelPropagator:
    """The package's own segmentation model as the step-3 plugin."""

    def __init__(self, model: SegModel):
        self.model = model

    def propagate(self, record, anchor_index, anchor_mask, target_indices):
        anchor = np.asarray(anchor_mask).astype(np.uint8)
        states = init_object_memories(self.model, record.image(anchor_index),
                                      anchor, [1])
        out = {}
        for t in target_indices:  # caller orders these walking away from the
            result, states = segment_frame(self.model, states,  # anchor
                                           record.image(t))
            out[t] = result.mask == 1
        return out


class SubprocessPropagator:
    """File-exchange fallback: writes frames + anchor mask to a directory,
    invokes `command <dir>`, and reads `<dir>/out/<frame>.png` masks back."""

    def __init__(self, command: list[str]):
        self.command = list(command)

    def propagate(self, record, anchor_index, anchor_mask, target_indices):
        with tempfile.TemporaryDirectory(prefix="memvos-prop-") as tmp:
            tmp = Path(tmp)
            from .data import save_image
            save_image(record.image(anchor_index),
                       tmp / "frames" / frame_name(anchor_index))
            for t in target_indices:
                save_image(record.image(t), tmp / "frames" / frame_name(t))
            save_mask(np.asarray(anchor_mask).astype(np.uint8),
                      tmp / "anchor.png")
            (tmp / "job.json").write_text(json.dumps(
                {"anchor": anchor_index, "targets": list(target_indices)}))
            subprocess.run([*self.command, str(tmp)], check=True)
            out = {}
            for t in target_indices:
                out[t] = load_mask(tmp / "out" / frame_name(t)) > 0
            return out


# ---------------------------------------------------------------------------
# queue plumbing

@dataclass
class CorrectionFlag:
    object_id: int
    frame: int
    reason: str


@dataclass
class CorrectionQueue:
    seq_id: str
    round: str
    flags: list[CorrectionFlag] = field(default_factory=list)

    def __post_init__(self):
        if self.round not in (SPARSE_ROUND, DENSE_ROUND):
            raise ValidationError(f"unknown correction round {self.round!r}")

    def to_json(self) -> str:
        return json.dumps({
            "sequence": self.seq_id,
            "round": self.round,
            "flags": [{"object": f.object_id, "frame": f.frame,
                       "reason": f.reason} for f in self.flags],
        }, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "CorrectionQueue":
        d = json.loads(Path(path).read_text())
        return cls(d["sequence"], d["round"],
                   [CorrectionFlag(f["object"], f["frame"], f["reason"])
                    for f in d["flags"]])


ObjectMasks = dict[int, np.ndarray]  # frame index -> binary mask
SparseMasks = dict[int, ObjectMasks]  # object id -> ObjectMasks


def sample_indices(num_frames: int, fps: float, target_fps: float = 1.0
                   ) -> list[int]:
    step = max(1, round(fps / target_fps))
    return list(range(0, num_frames, step))


# ---------------------------------------------------------------------------
# pipeline steps

def _best_candidate(candidates: list[np.ndarray], box: Box) -> np.ndarray | None:
    """Highest box-overlap candidate (IoU between the candidate's bounding
    box and the tracked box); None when nothing overlaps."""
    best, best_iou = None, 0.0
    for cand in candidates:
        cbox = Box.from_mask(cand)
        if cbox is None:
            continue
        iy = max(0, min(cbox.y1, box.y1) - max(cbox.y0, box.y0))
        ix = max(0, min(cbox.x1, box.x1) - max(cbox.x0, box.x0))
        inter = iy * ix
        union = cbox.area + box.area - inter
        iou = inter / union if union else 0.0
        if iou > best_iou:
            best, best_iou = cand, iou
    return best


def step1_auto_segment(record: SequenceRecord, first_boxes: dict[int, Box],
                       segmenters: dict[int, InstanceSegmenter],
                       trackers: dict[int, BoxTracker]
                       ) -> tuple[SparseMasks, list[CorrectionFlag]]:
    """Track each object's box through the 1 FPS samples and pick the
    best-overlapping candidate mask per frame."""
    anchors = sample_indices(record.num_frames, record.fps)
    sparse: SparseMasks = {}
    flags: list[CorrectionFlag] = []
    for oid, first_box in sorted(first_boxes.items()):
        masks: ObjectMasks = {}
        try:
            boxes = trackers[oid].track(record, anchors[0], first_box, anchors)
        except Exception as e:
            flags.extend(CorrectionFlag(oid, t, f"tracker-error: {e}")
                         for t in anchors)
            sparse[oid] = masks
            continue
        for t in anchors:
            box = boxes.get(t)
            if box is None:
                masks[t] = None
                continue
            try:
                candidates = segmenters[oid].segment(record.image(t), t)
            except Exception as e:
                flags.append(CorrectionFlag(oid, t, f"segmenter-error: {e}"))
                masks[t] = None
                continue
            best = _best_candidate(candidates, box)
            if best is None:
                flags.append(CorrectionFlag(oid, t, "no-candidate-in-box"))
                masks[t] = None
            else:
                masks[t] = best.astype(bool)
        sparse[oid] = masks
    return sparse, flags


def flag_for_correction(masks: SparseMasks, round: str, seq_id: str = "",
                        extra: list[CorrectionFlag] | None = None,
                        iou_drop: float = IOU_DROP_THRESHOLD,
                        area_spike: float = AREA_SPIKE_RATIO
                        ) -> CorrectionQueue:
    """Heuristic flags: a hole between populated neighbours, a sharp overlap
    drop between adjacent samples, or an area spike."""
    queue = CorrectionQueue(seq_id, round, list(extra or ()))
    for oid, per_frame in sorted(masks.items()):
        ts = sorted(per_frame)
        areas = {t: (0 if per_frame[t] is None
                     else int(np.count_nonzero(per_frame[t]))) for t in ts}
        for i, t in enumerate(ts):
            prev_t = ts[i - 1] if i > 0 else None
            next_t = ts[i + 1] if i + 1 < len(ts) else None
            if (areas[t] == 0 and prev_t is not None and next_t is not None
                    and areas[prev_t] > 0 and areas[next_t] > 0):
                queue.flags.append(CorrectionFlag(oid, t, "hole"))
                continue
            if prev_t is not None and areas[t] > 0 and areas[prev_t] > 0:
                iou = region_similarity(per_frame[t].astype(np.uint8),
                                        per_frame[prev_t].astype(np.uint8), 1)
                if iou < iou_drop:
                    queue.flags.append(CorrectionFlag(oid, t, "iou-drop"))
                    continue
                ratio = areas[t] / areas[prev_t]
                if ratio > area_spike or ratio < 1.0 / area_spike:
                    queue.flags.append(CorrectionFlag(oid, t, "area-spike"))
    return queue


def apply_corrections(masks: SparseMasks, corrections: SparseMasks
                      ) -> SparseMasks:
    """Merge externally corrected masks; corrections are authoritative even
    for unflagged frames. Idempotent."""
    out: SparseMasks = {oid: dict(per) for oid, per in masks.items()}
    for oid, per in corrections.items():
        dst = out.setdefault(oid, {})
        for t, m in per.items():
            dst[t] = None if m is None else np.asarray(m).astype(bool)
    return out


def export_corrections_dir(masks: SparseMasks, directory: str | Path) -> None:
    """Write per-object mask PNGs in the dataset codec (exchange format for
    the external correction tool)."""
    directory = Path(directory)
    for oid, per in masks.items():
        for t, m in per.items():
            if m is None:
                continue
            save_mask(m.astype(np.uint8), directory / str(oid) / frame_name(t))


def import_corrections_dir(directory: str | Path) -> SparseMasks:
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"corrections directory not found: {directory}")
    out: SparseMasks = {}
    for obj_dir in sorted(directory.iterdir()):
        if not obj_dir.is_dir():
            continue
        try:
            oid = int(obj_dir.name)
        except ValueError as e:
            raise FormatError(f"bad object directory {obj_dir.name!r}") from e
        masks: ObjectMasks = {}
        for p in sorted(obj_dir.glob("*.png")):
            masks[int(p.stem)] = load_mask(p) > 0
        out[oid] = masks
    return out


def _gap_runs(anchors: list[int], num_frames: int
              ) -> list[tuple[int, list[int]]]:
    """(seed anchor, ordered targets) runs covering every unlabeled frame.

    Frames between two anchors are walked forward from the earlier anchor
    (the direction tie between flanking anchors breaks toward the earlier
    one); frames before the first anchor are walked backward from it."""
    runs = []
    if not anchors:
        raise ValidationError("propagation needs at least one anchor")
    first = anchors[0]
    if first > 0:
        runs.append((first, list(range(first - 1, -1, -1))))
    for a, b in zip(anchors, anchors[1:]):
        targets = list(range(a + 1, b))
        if targets:
            runs.append((a, targets))
    last = anchors[-1]
    tail = list(range(last + 1, num_frames))
    if tail:
        runs.append((last, tail))
    return runs


def step3_propagate(sparse: SparseMasks, record: SequenceRecord,
                    propagators: dict[int, MaskPropagator]
                    ) -> tuple[SparseMasks, list[CorrectionFlag]]:
    """Densify 1 FPS anchors to every frame via the propagator plugin."""
    dense: SparseMasks = {}
    flags: list[CorrectionFlag] = []
    for oid, per in sorted(sparse.items()):
        anchors = sorted(t for t, m in per.items() if m is not None)
        out: ObjectMasks = {t: per[t] for t in anchors}
        if not anchors:
            flags.append(CorrectionFlag(oid, 0, "no-anchors"))
            dense[oid] = out
            continue
        for seed, targets in _gap_runs(anchors, record.num_frames):
            try:
                got = propagators[oid].propagate(record, seed, per[seed],
                                                 targets)
            except Exception as e:
                flags.extend(CorrectionFlag(oid, t, f"propagator-error: {e}")
                             for t in targets)
                for t in targets:
                    out.setdefault(t, None)
                continue
            for t in targets:
                out[t] = got.get(t)
                if out[t] is None:
                    flags.append(CorrectionFlag(oid, t, "propagator-missing"))
        dense[oid] = out
    return dense, flags


def assemble_label_masks(dense: SparseMasks, num_frames: int,
                         shape: tuple[int, int]) -> list[Mask]:
    """Combine per-object binary masks into label grids (higher ids painted
    last on the rare overlap)."""
    out = []
    for t in range(num_frames):
        lab = np.zeros(shape, dtype=np.uint8)
        for oid in sorted(dense):
            m = dense[oid].get(t)
            if m is not None:
                lab[m.astype(bool)] = oid
        out.append(lab)
    return out


def audit_quality(produced: SparseMasks, reference: SparseMasks
                  ) -> tuple[float, list[tuple[int, int, float]]]:
    """Mean IoU over annotated object-frames, plus (object, frame, iou)
    detail rows."""
    detail = []
    for oid in sorted(reference):
        if oid not in produced:
            raise ValidationError(f"produced masks missing object {oid}")
        ref = reference[oid]
        got = produced[oid]
        if set(ref) - set(got):
            raise ValidationError(
                f"object {oid}: frame sets differ "
                f"(missing {sorted(set(ref) - set(got))[:5]}...)")
        for t in sorted(ref):
            p = got[t]
            p = np.zeros_like(ref[t]) if p is None else p
            detail.append((oid, t, region_similarity(
                p.astype(np.uint8), ref[t].astype(np.uint8), 1)))
    if not detail:
        raise ValidationError("no annotated object-frames to audit")
    return float(np.mean([d[2] for d in detail])), detail


@dataclass
class PipelineResult:
    dense: SparseMasks
    label_masks: list[Mask]
    queue_round1: CorrectionQueue
    queue_round2: CorrectionQueue
    audit_iou: float | None = None


def run_pipeline(record: SequenceRecord, first_boxes: dict[int, Box],
                 segmenters, trackers, propagators,
                 workdir: str | Path | None = None,
                 corrections1: SparseMasks | None = None,
                 corrections2: SparseMasks | None = None) -> PipelineResult:
    """All four steps for one sequence. Correction rounds export their queues
    into `workdir` (when given) and apply the provided correction sets; with
    no corrections the flagged frames pass through unchanged."""
    sparse, step1_flags = step1_auto_segment(record, first_boxes, segmenters,
                                             trackers)
    queue1 = flag_for_correction(sparse, SPARSE_ROUND, record.seq_id,
                                 step1_flags)
    if workdir is not None:
        queue1.save(Path(workdir) / "queue_round1.json")
    if corrections1:
        sparse = apply_corrections(sparse, corrections1)

    dense, step3_flags = step3_propagate(sparse, record, propagators)
    queue2 = flag_for_correction(dense, DENSE_ROUND, record.seq_id,
                                 step3_flags)
    if workdir is not None:
        queue2.save(Path(workdir) / "queue_round2.json")
    if corrections2:
        dense = apply_corrections(dense, corrections2)

    shape = np.asarray(record.image(0)).shape[:2]
    labels = assemble_label_masks(dense, record.num_frames, shape)
    audit = None
    if record.groundtruth is not None:
        reference = {
            oid: {t: (record.groundtruth[t] == oid)
                  for t in range(record.num_frames)}
            for oid in record.object_ids}
        audit, _ = audit_quality(dense, reference)
    return PipelineResult(dense, labels, queue1, queue2, audit)
