"""Sequence/dataset evaluation, oracle experiments, bank ablations, and
attribute tooling.

Protocol: frame 1 and its groundtruth initialize each object's memory; frames
2..T are segmented in order and every predicted frame is scored (frame 1, the
given mask, is never scored). The dataset aggregate is an unweighted mean over
object tracks (each object of each sequence counts once).

Timing is collected but kept out of the deterministic report payload so that
re-runs stay byte-identical; see `report_to_dict` vs `timing_to_dict`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import (ATTRIBUTES, DatasetManifest, SequenceRecord,
                   load_manifest_sequences)
from .errors import ProtocolError, ValidationError
from .metrics import FrameScore, SequenceScore, score_frame, sequence_score
from .memory import memory_footprint
from .model import SegModel, init_object_memories, segment_frame
from .modes import ALL_BANKS, BankCombo, Box, OracleMode

FM_JUMP_PX = 20.0          # fast motion: per-frame centroid jump above this
LR_AREA_RATIO = 0.1        # low resolution: mean box/image area ratio below
SV_RATIO_RANGE = (0.5, 2.0)  # scale variation: some box-area pair outside
LRA_MIN_GAP = 100          # long-term reappearance: invisible at least this


# ---------------------------------------------------------------------------
# attribute classification

def classify_attributes(record: SequenceRecord) -> frozenset[str]:
    """Quantitative attributes derivable from groundtruth masks alone.

    FM/LR/SV/OV/LRA per their threshold definitions; the manual attributes
    (BC, DEF, MB, DB, SC, AC) and the context-dependent OCC/CTC are never
    computed here, they come from manifests or generator scripts.
    """
    if record.groundtruth is None:
        raise ProtocolError("attribute classification needs groundtruth masks")
    h, w = np.asarray(record.groundtruth[0]).shape
    image_area = float(h * w)
    attrs: set[str] = set()
    for oid in record.object_ids:
        centroids: list[tuple[float, float] | None] = []
        box_areas: list[float] = []
        visible: list[bool] = []
        for m in record.groundtruth:
            ys, xs = np.nonzero(np.asarray(m) == oid)
            if ys.size == 0:
                centroids.append(None)
                visible.append(False)
                continue
            visible.append(True)
            centroids.append((float(ys.mean()), float(xs.mean())))
            box = Box.from_mask(np.asarray(m) == oid)
            box_areas.append(float(box.area))
        # FM: consecutive frames, both visible
        for c0, c1 in zip(centroids, centroids[1:]):
            if c0 is not None and c1 is not None:
                if np.hypot(c1[0] - c0[0], c1[1] - c0[1]) > FM_JUMP_PX:
                    attrs.add("FM")
                    break
        if box_areas and float(np.mean(box_areas)) / image_area < LR_AREA_RATIO:
            attrs.add("LR")
        if box_areas:
            lo, hi = min(box_areas), max(box_areas)
            if lo > 0 and (hi / lo > SV_RATIO_RANGE[1]
                           or lo / hi < SV_RATIO_RANGE[0]):
                attrs.add("SV")
        if not all(visible):
            attrs.add("OV")
        gap = 0
        for v in visible:
            if not v:
                gap += 1
            else:
                if gap >= LRA_MIN_GAP:
                    attrs.add("LRA")
                gap = 0
    return frozenset(attrs)


def reappearance_events(record: SequenceRecord, object_id: int,
                        min_gap: int = LRA_MIN_GAP) -> list[int]:
    """Frame indices where the object returns after >= min_gap invisible
    frames."""
    vis = record.visibility[object_id]
    events, gap = [], 0
    for t, v in enumerate(vis):
        if not v:
            gap += 1
        else:
            if gap >= min_gap:
                events.append(t)
            gap = 0
    return events


# ---------------------------------------------------------------------------
# evaluation protocol

@dataclass
class TrackResult:
    seq_id: str
    object_id: int
    frames: list[FrameScore]
    score: SequenceScore


@dataclass
class SequenceResult:
    seq_id: str
    tracks: list[TrackResult]
    score: SequenceScore
    frame_seconds: list[float] = field(default_factory=list)
    peak_footprint: int = 0


@dataclass
class EvalReport:
    oracle: str
    banks: str
    sequences: list[SequenceResult] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def tracks(self) -> list[TrackResult]:
        return [t for s in self.sequences for t in s.tracks]

    @property
    def mean_j(self) -> float:
        return float(np.mean([t.score.mean_j for t in self.tracks]))

    @property
    def mean_f(self) -> float:
        return float(np.mean([t.score.mean_f for t in self.tracks]))

    @property
    def jf(self) -> float:
        return (self.mean_j + self.mean_f) / 2.0

    @property
    def peak_footprint(self) -> int:
        return max((s.peak_footprint for s in self.sequences), default=0)

    def sequence(self, seq_id: str) -> SequenceResult:
        for s in self.sequences:
            if s.seq_id == seq_id:
                return s
        raise KeyError(seq_id)


def evaluate_sequence(model: SegModel, record: SequenceRecord,
                      oracle: OracleMode = OracleMode.NONE,
                      combo: BankCombo = ALL_BANKS,
                      tolerance: int | None = None) -> SequenceResult:
    """Run the semi-supervised protocol over one sequence and score it."""
    if record.groundtruth is None:
        raise ProtocolError(f"{record.seq_id}: evaluation needs groundtruth")
    first = record.groundtruth[0]
    if not record.object_ids:
        raise ProtocolError(f"{record.seq_id}: no annotated objects")
    for oid in record.object_ids:
        if not (np.asarray(first) == oid).any():
            raise ProtocolError(
                f"{record.seq_id}: object {oid} missing from the first-frame "
                f"mask")
    if oracle is not OracleMode.NONE:
        if any(m is None for m in record.groundtruth):
            raise ValidationError(
                f"oracle mode {oracle.value} needs groundtruth on every frame")

    states = init_object_memories(model, record.image(0), first,
                                  record.object_ids)
    per_object: dict[int, list[FrameScore]] = {o: [] for o in record.object_ids}
    times: list[float] = []
    peak = sum(memory_footprint(s) for s in states.values())
    for t in range(1, record.num_frames):
        image = record.image(t)
        gt = record.groundtruth[t]
        t0 = time.perf_counter()
        result, states = segment_frame(
            model, states, image, oracle=oracle,
            gt_mask=gt if oracle is not OracleMode.NONE else None,
            combo=combo)
        times.append(time.perf_counter() - t0)
        peak = max(peak, sum(memory_footprint(s) for s in states.values()))
        for oid in record.object_ids:
            per_object[oid].append(
                score_frame(result.mask, gt, oid, t, tolerance))
    tracks = [TrackResult(record.seq_id, oid, scores, sequence_score(scores))
              for oid, scores in per_object.items()]
    mj = float(np.mean([t.score.mean_j for t in tracks]))
    mf = float(np.mean([t.score.mean_f for t in tracks]))
    return SequenceResult(record.seq_id, tracks,
                          SequenceScore(mj, mf, (mj + mf) / 2.0),
                          times, peak)


def evaluate_dataset(model: SegModel, manifest: DatasetManifest, root,
                     oracle: OracleMode = OracleMode.NONE,
                     combo: BankCombo = ALL_BANKS,
                     tolerance: int | None = None,
                     workers: int = 1) -> EvalReport:
    """Evaluate every manifest sequence; per-sequence failures are recorded
    in the report instead of aborting the run.

    workers > 1 evaluates sequences in a thread pool (results keep manifest
    order). Bit-exact determinism is only guaranteed at workers = 1.
    """
    if not manifest.entries:
        raise ValidationError("manifest lists no sequences")
    report = EvalReport(oracle=oracle.value, banks=combo.name)

    def run_one(entry_rec):
        entry, rec = entry_rec
        if isinstance(rec, Exception):
            return entry.seq_id, rec
        try:
            return entry.seq_id, evaluate_sequence(model, rec, oracle, combo,
                                                   tolerance)
        except Exception as e:
            return entry.seq_id, e

    pairs = list(load_manifest_sequences(root, manifest))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, pairs))
    else:
        results = [run_one(p) for p in pairs]
    for seq_id, res in results:
        if isinstance(res, Exception):
            report.failures[seq_id] = f"{type(res).__name__}: {res}"
        else:
            report.sequences.append(res)
    if not report.sequences:
        raise ValidationError("no sequence evaluated successfully")
    return report


def attribute_breakdown(report: EvalReport, manifest: DatasetManifest
                        ) -> dict[str, float | None]:
    """Mean J per attribute over the sequences carrying it (attributes are
    non-exclusive). Attributes with no sequences map to None."""
    seq_j = {s.seq_id: s.score.mean_j for s in report.sequences}
    out: dict[str, float | None] = {}
    for attr in ATTRIBUTES:
        vals = [seq_j[e.seq_id] for e in manifest.entries
                if attr in e.attributes and e.seq_id in seq_j]
        out[attr] = float(np.mean(vals)) if vals else None
    return out


def ablation_suite(model: SegModel, manifest: DatasetManifest, root,
                   oracle: OracleMode = OracleMode.NONE
                   ) -> dict[str, EvalReport]:
    """Evaluate all 7 valid bank combinations. Keys are combo names ('r',
    'g', 'l', 'rg', 'rl', 'gl', 'rgl')."""
    return {combo.name: evaluate_dataset(model, manifest, root, oracle, combo)
            for combo in BankCombo.all_combos()}


def oracle_suite(model: SegModel, manifest: DatasetManifest, root,
                 combo: BankCombo = ALL_BANKS) -> dict[str, EvalReport]:
    """Evaluate all four oracle modes with the given bank combination."""
    return {mode.value: evaluate_dataset(model, manifest, root, mode, combo)
            for mode in OracleMode}


# ---------------------------------------------------------------------------
# serialization (deterministic payload vs timing side-channel)

def report_to_dict(report: EvalReport,
                   manifest: DatasetManifest | None = None) -> dict:
    payload = {
        "oracle": report.oracle,
        "banks": report.banks,
        "dataset": {"mean_j": report.mean_j, "mean_f": report.mean_f,
                    "jf": report.jf},
        "peak_state_elements": report.peak_footprint,
        "sequences": [
            {
                "id": s.seq_id,
                "mean_j": s.score.mean_j,
                "mean_f": s.score.mean_f,
                "jf": s.score.jf,
                "tracks": [
                    {"object": t.object_id, "mean_j": t.score.mean_j,
                     "mean_f": t.score.mean_f, "jf": t.score.jf}
                    for t in s.tracks
                ],
            }
            for s in report.sequences
        ],
        "failures": dict(sorted(report.failures.items())),
    }
    if manifest is not None:
        payload["attribute_mean_j"] = attribute_breakdown(report, manifest)
    return payload


def timing_to_dict(report: EvalReport) -> dict:
    all_times = [x for s in report.sequences for x in s.frame_seconds]
    return {
        "frames_timed": len(all_times),
        "mean_seconds_per_frame": float(np.mean(all_times)) if all_times else 0.0,
        "frames_per_second": (1.0 / float(np.mean(all_times))
                              if all_times else 0.0),
        "per_sequence": {
            s.seq_id: {"frames": len(s.frame_seconds),
                       "mean_seconds": (float(np.mean(s.frame_seconds))
                                        if s.frame_seconds else 0.0)}
            for s in report.sequences
        },
    }


def frame_detail_rows(report: EvalReport) -> list[str]:
    """Per-frame detail table, fixed columns: sequence,object,frame,j,f."""
    rows = ["sequence,object,frame,j,f"]
    for s in report.sequences:
        for t in s.tracks:
            for fs in t.frames:
                rows.append(f"{s.seq_id},{t.object_id},{fs.frame_index},"
                            f"{fs.j:.6f},{fs.f:.6f}")
    return rows
