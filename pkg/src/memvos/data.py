"""Dataset layout, indexed-palette mask codec, manifests, and statistics.

On-disk layout (one directory = one dataset root):

    <root>/images/<seq>/<%08d>.png        RGB frames
    <root>/annotations/<seq>/<%08d>.png   8-bit palette masks, pixel = object id
    <root>/manifests/<split>.json         split manifest (see MANIFEST_SCHEMA_VERSION)

Masks are stored as single-channel palette PNGs where the pixel value is the
object id (0 = background), so a mask round-trips bit-exactly through save/load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, NotFoundError, UnsupportedError, ValidationError

# The 13 recognized video attributes. The last two are specific to long videos.
ATTRIBUTES = ("BC", "DEF", "MB", "FM", "LR", "OCC", "OV", "SV", "DB", "SC",
              "AC", "LRA", "CTC")
# Attributes that can be computed from groundtruth masks alone.
QUANTITATIVE_ATTRIBUTES = ("FM", "LR", "SV", "OV", "LRA")

MANIFEST_SCHEMA_VERSION = 1
DEFAULT_FPS = 6.0

Mask = np.ndarray  # (H, W) uint8 grid of object ids, 0 = background


def _build_palette() -> bytes:
    # Stable 256-color palette: index 0 black, low ids saturated and distinct.
    base = [
        (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25),
        (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240),
        (240, 50, 230), (210, 245, 60), (250, 190, 190), (0, 128, 128),
    ]
    pal = list(base)
    for i in range(len(base), 256):
        pal.append((i * 67 % 256, i * 113 % 256, i * 197 % 256))
    return bytes(v for rgb in pal for v in rgb)


MASK_PALETTE = _build_palette()


def save_mask(mask: Mask, path: str | Path) -> None:
    """Write a label grid as an 8-bit palette PNG; reload is bit-exact."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.min() < 0 or mask.max() > 255:
        raise UnsupportedError(
            f"mask codec stores ids 0..255, got max id {int(mask.max())}")
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette(MASK_PALETTE)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")


def load_mask(path: str | Path) -> Mask:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"mask file not found: {path}")
    img = Image.open(path)
    if img.mode != "P":
        raise FormatError(f"expected palette-mode mask PNG at {path}, "
                          f"got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8)


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 RGB frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(
        path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"image file not found: {path}")
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


@dataclass
class SequenceRecord:
    """One video: frames, optional dense groundtruth, and bookkeeping.

    Either `frame_paths` (disk-backed) or `images` (in-memory, (T, H, W, 3)
    uint8) provides the frames. Visibility is always derived from groundtruth
    pixel counts, never stored independently.
    """

    seq_id: str
    object_ids: tuple[int, ...]
    fps: float = DEFAULT_FPS
    frame_paths: tuple[Path, ...] | None = None
    images: np.ndarray | None = None
    groundtruth: list[Mask] | None = None
    visibility: dict[int, np.ndarray] | None = None
    attributes: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.frame_paths is None and self.images is None:
            raise ValidationError("record needs frame paths or in-memory images")
        if self.num_frames < 1:
            raise ValidationError("sequence must contain at least one frame")
        bad = set(self.attributes) - set(ATTRIBUTES)
        if bad:
            raise ValidationError(f"unknown attributes: {sorted(bad)}")
        if self.groundtruth is not None and self.visibility is None:
            self.visibility = derive_visibility(self.groundtruth, self.object_ids)

    @property
    def num_frames(self) -> int:
        if self.frame_paths is not None:
            return len(self.frame_paths)
        return int(self.images.shape[0])

    def image(self, t: int) -> np.ndarray:
        """Frame t as (H, W, 3) uint8."""
        if self.images is not None:
            return self.images[t]
        return load_image(self.frame_paths[t])

    def mask(self, t: int) -> Mask | None:
        return None if self.groundtruth is None else self.groundtruth[t]


def derive_visibility(groundtruth: list[Mask],
                      object_ids) -> dict[int, np.ndarray]:
    vis = {}
    for oid in object_ids:
        vis[oid] = np.array([bool((m == oid).any()) for m in groundtruth])
    return vis


@dataclass
class ManifestEntry:
    seq_id: str
    object_count: int
    attributes: frozenset[str] = frozenset()


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self):
        if self.split not in ("train", "valid", "test"):
            raise ValidationError(f"split must be train/valid/test, got "
                                  f"{self.split!r}")
        ids = [e.seq_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate sequence id in manifest")
        for e in self.entries:
            bad = set(e.attributes) - set(ATTRIBUTES)
            if bad:
                raise ValidationError(
                    f"{e.seq_id}: unknown attributes {sorted(bad)}")

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "split": self.split,
            "sequences": [
                {"id": e.seq_id, "object_count": e.object_count,
                 "attributes": sorted(e.attributes)}
                for e in self.entries
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest is not valid JSON: {e}") from e
        if payload.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise FormatError(
                f"unsupported manifest schema version "
                f"{payload.get('schema_version')!r}")
        entries = [
            ManifestEntry(s["id"], int(s["object_count"]),
                          frozenset(s.get("attributes", ())))
            for s in payload.get("sequences", [])
        ]
        return cls(split=payload["split"], entries=entries)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise NotFoundError(f"manifest not found: {path}")
        return cls.from_json(path.read_text())


def manifest_path(root: str | Path, split: str) -> Path:
    return Path(root) / "manifests" / f"{split}.json"


def frame_name(t: int) -> str:
    return f"{t:08d}.png"


def load_sequence(root: str | Path, seq_id: str,
                  object_ids=None,
                  attributes: frozenset[str] = frozenset(),
                  fps: float = DEFAULT_FPS) -> SequenceRecord:
    """Load one sequence from the dataset layout.

    Masks, when present, are validated against `object_ids` (defaults to the
    ids observed in the masks) and against the frame dimensions.
    """
    root = Path(root)
    img_dir = root / "images" / seq_id
    if not img_dir.is_dir():
        raise NotFoundError(f"no images directory for sequence {seq_id!r} "
                            f"under {root}")
    frame_paths = tuple(sorted(img_dir.glob("*.png")))
    if not frame_paths:
        raise NotFoundError(f"sequence {seq_id!r} has no frames")

    ann_dir = root / "annotations" / seq_id
    groundtruth = None
    if ann_dir.is_dir():
        groundtruth = []
        first_shape = None
        for p in frame_paths:
            mp = ann_dir / p.name
            if not mp.exists():
                raise FormatError(f"missing annotation for frame {p.name} "
                                  f"of {seq_id!r}")
            m = load_mask(mp)
            with Image.open(p) as im:
                if m.shape != (im.height, im.width):
                    raise FormatError(
                        f"{seq_id}/{p.name}: mask shape {m.shape} does not "
                        f"match image {(im.height, im.width)}")
            if first_shape is None:
                first_shape = m.shape
            elif m.shape != first_shape:
                raise FormatError(f"{seq_id}: inconsistent mask shapes")
            groundtruth.append(m)
        seen = set()
        for m in groundtruth:
            seen.update(np.unique(m).tolist())
        seen.discard(0)
        if object_ids is None:
            object_ids = tuple(sorted(seen))
        else:
            extra = seen - set(object_ids)
            if extra:
                raise ValidationError(
                    f"{seq_id}: mask labels {sorted(extra)} outside declared "
                    f"object set {sorted(object_ids)}")
    if object_ids is None:
        object_ids = ()

    return SequenceRecord(seq_id=seq_id, object_ids=tuple(object_ids), fps=fps,
                          frame_paths=frame_paths, groundtruth=groundtruth,
                          attributes=attributes)


def load_manifest_sequences(root: str | Path, manifest: DatasetManifest):
    """Yield (entry, record-or-exception) for every manifest entry."""
    for entry in manifest.entries:
        try:
            rec = load_sequence(root, entry.seq_id, attributes=entry.attributes)
            yield entry, rec
        except Exception as e:  # collected by callers into partial reports
            yield entry, e


@dataclass
class StatsReport:
    video_count: int = 0
    total_frames: int = 0
    mean_frames: float = 0.0
    total_annotations: int = 0
    mean_duration_min: float = 0.0
    mean_objects_per_video: float = 0.0
    failures: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "video_count": self.video_count,
            "total_frames": self.total_frames,
            "mean_frames": self.mean_frames,
            "total_annotations": self.total_annotations,
            "mean_duration_min": self.mean_duration_min,
            "mean_objects_per_video": self.mean_objects_per_video,
            "failures": dict(sorted(self.failures.items())),
        }


def dataset_stats(manifest: DatasetManifest, root: str | Path) -> StatsReport:
    """Aggregate counts over a split.

    An annotation is one visible object in one annotated frame, so the total
    equals the per-frame sum of visible objects. Per-sequence load failures
    are collected, not fatal.
    """
    report = StatsReport()
    frame_counts = []
    durations = []
    object_counts = []
    for entry, rec in load_manifest_sequences(root, manifest):
        if isinstance(rec, Exception):
            report.failures[entry.seq_id] = f"{type(rec).__name__}: {rec}"
            continue
        frame_counts.append(rec.num_frames)
        durations.append(rec.num_frames / rec.fps / 60.0)
        object_counts.append(len(rec.object_ids))
        if rec.visibility is not None:
            report.total_annotations += int(
                sum(v.sum() for v in rec.visibility.values()))
    report.video_count = len(frame_counts)
    report.total_frames = int(np.sum(frame_counts)) if frame_counts else 0
    if frame_counts:
        report.mean_frames = float(np.mean(frame_counts))
        report.mean_duration_min = float(np.mean(durations))
        report.mean_objects_per_video = float(np.mean(object_counts))
    return report


def write_sequence(root: str | Path, record: SequenceRecord) -> SequenceRecord:
    """Materialize an in-memory record into the dataset layout."""
    root = Path(root)
    paths = []
    for t in range(record.num_frames):
        p = root / "images" / record.seq_id / frame_name(t)
        save_image(record.image(t), p)
        paths.append(p)
        if record.groundtruth is not None:
            save_mask(record.groundtruth[t],
                      root / "annotations" / record.seq_id / frame_name(t))
    record.frame_paths = tuple(paths)
    return record
