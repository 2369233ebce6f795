"""Deterministic synthetic long-video generator.

Sequences are built from per-object scripts: a shape (ellipse, circle, or
regular polygon) with a color, a piecewise-linear trajectory and scale track,
and optional invisible intervals. Distractor scripts draw look-alike shapes
that are not annotated; occluder scripts draw on top of objects and erase the
covered pixels from the groundtruth. Rendering is a pure function of the spec
(the spec carries its own seed), so equal specs produce byte-identical frames
and masks.

`standard_suites` returns the fixed named suites used throughout the tests:

  short-easy  <=60 frames, moderate motion, no disappearance
  long-lra    600 frames with >=100-frame invisible gaps
  ctc         look-alike distractors active only while the target is hidden
  fm-sv       scripted >20 px jumps plus strong scale change
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kernels
from .data import SequenceRecord, write_sequence, derive_visibility
from .errors import ValidationError

CANVAS_DEFAULT = (96, 96)

# saturated, mutually distinct foreground colors (RGB in [0,1])
COLOR_POOL = (
    (0.92, 0.18, 0.16), (0.18, 0.75, 0.24), (0.98, 0.86, 0.12),
    (0.16, 0.45, 0.88), (0.93, 0.48, 0.13), (0.56, 0.16, 0.72),
    (0.12, 0.85, 0.83), (0.91, 0.22, 0.85),
)
BG_POOL = ((0.22, 0.24, 0.27), (0.30, 0.28, 0.22), (0.20, 0.29, 0.25),
           (0.33, 0.30, 0.33))


@dataclass(frozen=True)
class ShapeScript:
    object_id: int                      # 0 for distractors/occluders
    kind: str                           # circle | ellipse | polygon
    color: tuple[float, float, float]
    size: float                         # circumradius / major semi-axis, px
    trajectory: tuple[tuple[int, float, float], ...]  # (frame, y, x)
    scale_keys: tuple[tuple[int, float], ...] = ((0, 1.0),)
    invisible: tuple[tuple[int, int], ...] = ()       # half-open intervals
    active: tuple[tuple[int, int], ...] = ()          # non-targets only
    sides: int = 5
    aspect: float = 0.7
    angle: float = 0.0
    texture: float = 0.0
    color_end: tuple[float, float, float] | None = None  # gradual drift
    role: str = "target"                # target | distractor | occluder

    def color_at(self, t: int, frames: int):
        if self.color_end is None:
            return np.asarray(self.color)
        u = t / max(1, frames - 1)
        return (1 - u) * np.asarray(self.color) + u * np.asarray(self.color_end)

    def __post_init__(self):
        if self.kind not in ("circle", "ellipse", "polygon"):
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if self.role not in ("target", "distractor", "occluder"):
            raise ValidationError(f"unknown role {self.role!r}")
        if self.size <= 0:
            raise ValidationError("shape size must be positive")
        if self.role == "target" and self.object_id < 1:
            raise ValidationError("target scripts need object_id >= 1")
        if not self.trajectory:
            raise ValidationError("trajectory needs at least one keyframe")

    def shown_at(self, t: int) -> bool:
        if self.role == "target":
            return not any(a <= t < b for a, b in self.invisible)
        return any(a <= t < b for a, b in self.active)


@dataclass(frozen=True)
class SynthSpec:
    name: str
    objects: tuple[ShapeScript, ...]
    canvas: tuple[int, int] = CANVAS_DEFAULT
    frames: int = 48
    seed: int = 0
    background: str = "flat"            # flat | drift
    bg_color: tuple[float, float, float] = BG_POOL[0]
    noise: float = 0.012

    def __post_init__(self):
        if self.frames < 1:
            raise ValidationError("spec needs at least one frame")
        if self.background not in ("flat", "drift"):
            raise ValidationError(f"unknown background mode {self.background!r}")
        targets = [s for s in self.objects if s.role == "target"]
        if not targets:
            raise ValidationError("spec needs at least one target script")
        ids = [s.object_id for s in targets]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate target object ids")
        h, w = self.canvas
        for s in self.objects:
            for a, b in s.invisible + s.active:
                if not (0 <= a < b <= self.frames):
                    raise ValidationError(
                        f"interval [{a},{b}) outside [0,{self.frames})")
            for f, y, x in s.trajectory:
                if not (0 <= y < h and 0 <= x < w):
                    raise ValidationError(
                        f"trajectory keyframe ({y},{x}) leaves the canvas")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        d = json.loads(text)
        scripts = []
        for s in d.pop("objects"):
            s["color"] = tuple(s["color"])
            if s.get("color_end") is not None:
                s["color_end"] = tuple(s["color_end"])
            s["trajectory"] = tuple(tuple(k) for k in s["trajectory"])
            s["scale_keys"] = tuple(tuple(k) for k in s["scale_keys"])
            s["invisible"] = tuple(tuple(k) for k in s["invisible"])
            s["active"] = tuple(tuple(k) for k in s["active"])
            scripts.append(ShapeScript(**s))
        d["objects"] = tuple(scripts)
        d["canvas"] = tuple(d["canvas"])
        d["bg_color"] = tuple(d["bg_color"])
        return cls(**d)


def _interp(keys, t: float):
    if t <= keys[0][0]:
        return keys[0][1:]
    if t >= keys[-1][0]:
        return keys[-1][1:]
    for (f0, *v0), (f1, *v1) in zip(keys, keys[1:]):
        if f0 <= t <= f1:
            a = (t - f0) / (f1 - f0) if f1 > f0 else 0.0
            return tuple(x0 + (x1 - x0) * a for x0, x1 in zip(v0, v1))
    return keys[-1][1:]


def _shape_mask(script: ShapeScript, t: int, canvas, scale_up: int = 1
                ) -> np.ndarray:
    h, w = canvas[0] * scale_up, canvas[1] * scale_up
    (cy, cx) = _interp(script.trajectory, t)
    (s,) = _interp(script.scale_keys, t)
    cy, cx = cy * scale_up, cx * scale_up
    r = script.size * s * scale_up
    if script.kind == "circle":
        return kernels.fill_ellipse(h, w, cy, cx, r, r, 0.0)
    if script.kind == "ellipse":
        return kernels.fill_ellipse(h, w, cy, cx, r * script.aspect, r,
                                    script.angle)
    ang = script.angle + 2.0 * np.pi * np.arange(script.sides) / script.sides
    ys = cy + r * np.sin(ang)
    xs = cx + r * np.cos(ang)
    return kernels.fill_polygon(h, w, ys, xs)


def _texture_field(script: ShapeScript, canvas) -> np.ndarray | None:
    if script.texture <= 0:
        return None
    h, w = canvas
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    phase = (script.object_id * 2.1 + script.size) % (2 * np.pi)
    stripes = np.sin(2 * np.pi * (yy * 0.13 + xx * 0.07) + phase)
    return 1.0 + script.texture * stripes


def _background(spec: SynthSpec, t: int, rng_field: np.ndarray | None
                ) -> np.ndarray:
    h, w = spec.canvas
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = spec.bg_color
    if spec.background == "drift" and rng_field is not None:
        shift_y, shift_x = t % h, (t * 2) % w
        drift = np.roll(np.roll(rng_field, shift_y, 0), shift_x, 1)
        img *= 1.0 + 0.12 * drift[:, :, None]
    return img


def _bg_noise_field(spec: SynthSpec) -> np.ndarray | None:
    if spec.background != "drift":
        return None
    rng = np.random.default_rng([spec.seed, 7])
    coarse = rng.normal(size=(12, 12))
    h, w = spec.canvas
    cell = max(-(-h // 12), -(-w // 12))
    return np.kron(coarse, np.ones((cell, cell)))[:h, :w]


def render_frame(spec: SynthSpec, t: int,
                 _bg_cache: np.ndarray | None = None):
    """Render (image uint8 (H,W,3), label mask uint8 (H,W)) for frame t."""
    if not (0 <= t < spec.frames):
        raise ValidationError(f"frame {t} outside [0,{spec.frames})")
    bg_field = _bg_cache if _bg_cache is not None else _bg_noise_field(spec)
    img = _background(spec, t, bg_field)
    ids = np.zeros(spec.canvas, dtype=np.uint8)
    order = [s for s in spec.objects if s.role == "target"] + \
            [s for s in spec.objects if s.role != "target"]
    for script in order:
        if not script.shown_at(t):
            continue
        m = _shape_mask(script, t, spec.canvas).astype(bool)
        if not m.any():
            continue
        tex = _texture_field(script, spec.canvas)
        color = script.color_at(t, spec.frames)
        if tex is None:
            img[m] = color
        else:
            img[m] = np.clip(color[None, :] * tex[m][:, None], 0, 1)
        ids[m] = script.object_id if script.role == "target" else 0
    noise_rng = np.random.default_rng([spec.seed, 1000003 + t])
    if spec.noise > 0:
        img = img + noise_rng.normal(0.0, spec.noise, size=img.shape)
    img8 = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return img8, ids


def render_mask(spec: SynthSpec, t: int, scale_up: int = 1) -> np.ndarray:
    """Label mask only, optionally rendered at an integer supersampling
    factor (used by the rendering sanity checks)."""
    ids = np.zeros((spec.canvas[0] * scale_up, spec.canvas[1] * scale_up),
                   dtype=np.uint8)
    order = [s for s in spec.objects if s.role == "target"] + \
            [s for s in spec.objects if s.role != "target"]
    for script in order:
        if not script.shown_at(t):
            continue
        m = _shape_mask(script, t, spec.canvas, scale_up).astype(bool)
        ids[m] = script.object_id if script.role == "target" else 0
    return ids


def script_attributes(spec: SynthSpec) -> frozenset[str]:
    """Attributes that only the script knows: occlusion, appearance change,
    and cross-temporal distractors (a look-alike never active while the
    target is visible)."""
    attrs = set()
    targets = [s for s in spec.objects if s.role == "target"]
    if any(s.role == "occluder" for s in spec.objects):
        attrs.add("OCC")
    if any(s.color_end is not None for s in targets):
        attrs.add("AC")
    for d in spec.objects:
        if d.role != "distractor":
            continue
        for tgt in targets:
            co_occur = any(d.shown_at(t) and tgt.shown_at(t)
                           for t in range(spec.frames))
            if not co_occur:
                attrs.add("CTC")
    return frozenset(attrs)


def generate(spec: SynthSpec, root: str | Path | None = None
             ) -> SequenceRecord:
    """Render the full sequence; optionally materialize it into a dataset
    root. The record's attribute set combines the mask-derived quantitative
    attributes with the script-derived OCC/CTC flags."""
    from .evaluation import classify_attributes  # deferred: avoids a cycle

    bg_field = _bg_noise_field(spec)
    images = np.empty((spec.frames, *spec.canvas, 3), dtype=np.uint8)
    masks = []
    for t in range(spec.frames):
        img, ids = render_frame(spec, t, bg_field)
        images[t] = img
        masks.append(ids)
    object_ids = tuple(sorted(s.object_id for s in spec.objects
                              if s.role == "target"))
    record = SequenceRecord(
        seq_id=spec.name, object_ids=object_ids, images=images,
        groundtruth=masks,
        visibility=derive_visibility(masks, object_ids))
    attrs = classify_attributes(record) | script_attributes(spec)
    record.attributes = frozenset(attrs)
    if root is not None:
        write_sequence(root, record)
    return record


# ---------------------------------------------------------------------------
# standard suites

def _wander_keys(rng, frames, lo_y, hi_y, lo_x, hi_x, step_per_frame,
                 key_every=16):
    """Waypoints whose straight-line speed never exceeds step_per_frame."""
    n_keys = max(2, frames // key_every + 1)
    y = rng.uniform(lo_y, hi_y)
    x = rng.uniform(lo_x, hi_x)
    keys = [(0, y, x)]
    prev_f = 0
    for k in range(1, n_keys):
        f = min(frames - 1, round(k * (frames - 1) / (n_keys - 1)))
        span = (f - prev_f) * step_per_frame
        ang = rng.uniform(0, 2 * np.pi)
        dist = span * np.sqrt(rng.uniform(0.2, 1.0))
        y = float(np.clip(y + dist * np.sin(ang), lo_y, hi_y))
        x = float(np.clip(x + dist * np.cos(ang), lo_x, hi_x))
        keys.append((f, y, x))
        prev_f = f
    return tuple(keys)


def _pick_shape(rng):
    kind = ["circle", "ellipse", "polygon"][rng.integers(0, 3)]
    if kind == "circle":
        return kind, float(rng.uniform(17.0, 21.0)), 0
    if kind == "ellipse":
        return kind, float(rng.uniform(19.0, 23.0)), 0
    return kind, float(rng.uniform(21.0, 24.0)), int(rng.integers(5, 7))


def _drift_color(rng, color, mix=0.28):
    """An end color `mix` of the way toward another pool color: enough to
    stale a frame-1 template, gradual enough that frame-to-frame tracking
    stays easy."""
    other = COLOR_POOL[int(rng.integers(0, len(COLOR_POOL)))]
    end = tuple((1 - mix) * c + mix * o for c, o in zip(color, other))
    if sum((a - b) ** 2 for a, b in zip(end, color)) < 0.02 * mix / 0.28:
        end = tuple(min(0.95, max(0.08, 0.65 * c + 0.3)) for c in color)
    return end


def _twin(rng, frames, canvas, target: ShapeScript, y_band):
    """An anchored impostor: same shape/size/texture and exactly the
    target's *starting* color, which it keeps while the target drifts away.
    A frame-1 template increasingly prefers the impostor as the video ages;
    only memory that follows the drift keeps the right object."""
    h, w = canvas
    return ShapeScript(
        object_id=0, kind=target.kind, color=target.color, size=target.size,
        trajectory=_wander_keys(rng, frames, y_band[0], y_band[1],
                                target.size + 4, w - target.size - 4, 1.1),
        active=((0, frames),), sides=target.sides, aspect=target.aspect,
        angle=target.angle, texture=target.texture,
        color_end=None, role="distractor")


def _basic_target(rng, frames, canvas, object_id=1, speed=1.1,
                  invisible=(), color=None, y_band=None, drift=False):
    h, w = canvas
    kind, size, sides = _pick_shape(rng)
    margin = size + 6
    lo_y, hi_y = y_band if y_band else (margin, h - margin)
    color = color or COLOR_POOL[int(rng.integers(0, len(COLOR_POOL)))]
    return ShapeScript(
        object_id=object_id, kind=kind, color=color, size=size,
        trajectory=_wander_keys(rng, frames, lo_y, hi_y, margin,
                                w - margin, speed),
        invisible=tuple(invisible), sides=sides,
        angle=float(rng.uniform(0, np.pi)),
        texture=float(rng.choice([0.0, 0.12])),
        color_end=_drift_color(rng, color) if drift else None)


def _decoy(rng, frames, canvas, target: ShapeScript, y_band, active=None):
    """A co-occurring unannotated shape in its own horizontal band. Its color
    keeps a healthy distance from the target's whole drift path, so memory
    matching (not saliency, not novelty) is the only way to tell them apart."""
    h, w = canvas
    path = [np.asarray(target.color_at(t, frames))
            for t in range(0, frames, max(1, frames // 8))]

    def dist(c):
        return min(float(np.sum((np.asarray(c) - p) ** 2)) for p in path)

    ranked = sorted(COLOR_POOL, key=dist, reverse=True)
    choices = [c for c in ranked[:4] if dist(c) >= 0.25] or ranked[:2]
    color = choices[int(rng.integers(0, len(choices)))]
    kind = ["circle", "ellipse", "polygon"][int(rng.integers(0, 3))]
    size = float(rng.uniform(10.0, 13.0))
    return ShapeScript(
        object_id=0, kind=kind, color=color, size=size,
        trajectory=_wander_keys(rng, frames, y_band[0], y_band[1], size + 4,
                                w - size - 4, 1.1),
        active=tuple(active) if active else ((0, frames),),
        sides=int(rng.integers(5, 7)),
        angle=float(rng.uniform(0, np.pi)),
        texture=float(rng.choice([0.0, 0.12])), role="distractor")


# disjoint vertical bands keep decoys from ever clipping the target mask;
# which band hosts the target flips per sequence
TARGET_BAND_TOP = (16.0, 34.0)
DECOY_BAND_BOTTOM = (72.0, 82.0)
TARGET_BAND_BOTTOM = (62.0, 80.0)
DECOY_BAND_TOP = (14.0, 24.0)
# twin sequences use same-size look-alikes, so both bands are sized for a
# full-size shape (radius ~16.5) with no mutual clipping
TWIN_BAND_TOP = (17.0, 30.0)
TWIN_BAND_BOTTOM = (66.0, 79.0)


def _spec_seed(suite: str, split: str, i: int) -> int:
    # stable across processes (never the builtin str hash)
    return (sum(ord(c) for c in suite) * 1009
            + sum(ord(c) for c in split) * 9176 + i * 131071)


def _short_easy(split: str, count: int) -> list[SynthSpec]:
    specs = []
    for i in range(count):
        seed = _spec_seed("short-easy", split, i)
        rng = np.random.default_rng(seed)
        frames = 48
        two_objects = (split == "valid" and i == count - 1) or \
            (split == "train" and i == 6)
        bg = BG_POOL[int(rng.integers(0, len(BG_POOL)))]
        if two_objects:
            # two flat ellipses in disjoint horizontal bands (no mutual
            # clipping), colors far apart
            objs = []
            for oid, color, (ylo, yhi) in (
                    (1, COLOR_POOL[0], (18.0, 30.0)),
                    (2, COLOR_POOL[3], (66.0, 78.0))):
                objs.append(ShapeScript(
                    object_id=oid, kind="ellipse", color=color, size=20.0,
                    trajectory=_wander_keys(rng, frames, ylo, yhi, 24.0,
                                            72.0, 1.1),
                    aspect=0.7, angle=0.0))
        elif (split == "valid" and i in (1, 3)) or \
                (split == "train" and i % 3 == 1):
            # drifting target + anchored impostor wearing its start color
            top = bool(rng.integers(0, 2))
            band_t = TWIN_BAND_TOP if top else TWIN_BAND_BOTTOM
            band_d = TWIN_BAND_BOTTOM if top else TWIN_BAND_TOP
            h, w = CANVAS_DEFAULT
            size = 16.5
            color = COLOR_POOL[int(rng.integers(0, len(COLOR_POOL)))]
            tgt = ShapeScript(
                object_id=1, kind="circle", color=color, size=size,
                trajectory=_wander_keys(rng, frames, band_t[0], band_t[1],
                                        size + 6, w - size - 6, 1.1),
                texture=float(rng.choice([0.0, 0.12])),
                color_end=_drift_color(rng, color, mix=0.5))
            objs = [tgt, _twin(rng, frames, CANVAS_DEFAULT, tgt, band_d)]
        else:
            top = bool(rng.integers(0, 2))
            tgt = _basic_target(
                rng, frames, CANVAS_DEFAULT, 1, drift=i % 3 != 2,
                y_band=TARGET_BAND_TOP if top else TARGET_BAND_BOTTOM)
            decoy = _decoy(rng, frames, CANVAS_DEFAULT, tgt,
                           DECOY_BAND_BOTTOM if top else DECOY_BAND_TOP)
            objs = [tgt, decoy]
        specs.append(SynthSpec(
            name=f"short-easy-{split}-{i:02d}", objects=tuple(objs),
            frames=frames, seed=seed,
            background="drift" if rng.uniform() < 0.5 else "flat",
            bg_color=bg))
    return specs


def _long_lra(split: str, count: int) -> list[SynthSpec]:
    specs = []
    for i in range(count):
        seed = _spec_seed("long-lra", split, i)
        rng = np.random.default_rng(seed)
        frames = 600
        gaps = [(180, 300)] if i % 2 == 0 else [(150, 270), (420, 540)]
        top = bool(rng.integers(0, 2))
        tgt = _basic_target(
            rng, frames, CANVAS_DEFAULT, 1, speed=1.1, invisible=gaps,
            drift=i % 2 == 1,
            y_band=TARGET_BAND_TOP if top else TARGET_BAND_BOTTOM)
        decoy_band = DECOY_BAND_BOTTOM if top else DECOY_BAND_TOP
        decoy = _decoy(rng, frames, CANVAS_DEFAULT, tgt, decoy_band)
        # a second decoy pops up in the same frame the target returns, so
        # both are equally novel and novelty alone cannot identify the target
        popup = _decoy(rng, frames, CANVAS_DEFAULT, tgt, decoy_band,
                       active=((gaps[0][1], frames),))
        specs.append(SynthSpec(
            name=f"long-lra-{split}-{i:02d}", objects=(tgt, decoy, popup),
            frames=frames, seed=seed, bg_color=BG_POOL[i % len(BG_POOL)]))
    return specs


def _ctc(split: str, count: int) -> list[SynthSpec]:
    specs = []
    for i in range(count):
        seed = _spec_seed("ctc", split, i)
        rng = np.random.default_rng(seed)
        frames = 240
        gap = (90, 150)
        tgt = _basic_target(rng, frames, CANVAS_DEFAULT, 1, speed=1.1,
                            invisible=[gap])
        h, w = CANVAS_DEFAULT
        margin = tgt.size + 6
        distractor = ShapeScript(
            object_id=0, kind=tgt.kind, color=tgt.color, size=tgt.size,
            trajectory=_wander_keys(rng, frames, margin, h - margin, margin,
                                    w - margin, 1.1),
            active=((gap[0] + 5, gap[1] - 5),), sides=tgt.sides,
            angle=tgt.angle, texture=tgt.texture, role="distractor")
        specs.append(SynthSpec(
            name=f"ctc-{split}-{i:02d}", objects=(tgt, distractor),
            frames=frames, seed=seed, bg_color=BG_POOL[i % len(BG_POOL)]))
    return specs


def _fm_sv(split: str, count: int) -> list[SynthSpec]:
    specs = []
    for i in range(count):
        seed = _spec_seed("fm-sv", split, i)
        rng = np.random.default_rng(seed)
        frames = 60
        h, w = CANVAS_DEFAULT
        size = float(rng.uniform(16.0, 18.0))
        margin = size * 1.7 + 4
        keys = list(_wander_keys(rng, frames, margin, h - margin, margin,
                                 w - margin, 1.1))
        # scripted jump: >20 px between consecutive frames, mid-sequence
        jf = frames // 2
        keys = [k for k in keys if not (jf - 2 <= k[0] <= jf + 2)]
        y0 = float(rng.uniform(margin, h - margin))
        x0 = float(rng.uniform(margin, w - margin - 27))
        keys += [(jf, y0, x0), (jf + 1, y0, x0 + 26.0)]
        keys.sort()
        kind = "circle" if i % 2 == 0 else "ellipse"
        tgt = ShapeScript(
            object_id=1, kind=kind,
            color=COLOR_POOL[int(rng.integers(0, len(COLOR_POOL)))],
            size=size, trajectory=tuple(keys),
            scale_keys=((0, 0.8), (frames - 1, 1.65)),
            angle=float(rng.uniform(0, np.pi)))
        specs.append(SynthSpec(
            name=f"fm-sv-{split}-{i:02d}", objects=(tgt,), frames=frames,
            seed=seed, bg_color=BG_POOL[i % len(BG_POOL)]))
    return specs


SUITE_SIZES = {
    "short-easy": {"train": 12, "valid": 6},
    "long-lra": {"train": 8, "valid": 5},
    "ctc": {"train": 4, "valid": 3},
    "fm-sv": {"train": 4, "valid": 3},
}

_BUILDERS = {"short-easy": _short_easy, "long-lra": _long_lra, "ctc": _ctc,
             "fm-sv": _fm_sv}


def standard_suites(names=None) -> dict[str, dict[str, list[SynthSpec]]]:
    """The fixed spec collections, reproducible across runs."""
    names = tuple(names) if names else tuple(SUITE_SIZES)
    out = {}
    for name in names:
        if name not in _BUILDERS:
            raise ValidationError(f"unknown suite {name!r}; expected one of "
                                  f"{sorted(_BUILDERS)}")
        out[name] = {split: _BUILDERS[name](split, n)
                     for split, n in SUITE_SIZES[name].items()}
    return out
