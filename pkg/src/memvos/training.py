"""Losses and the two-phase training schedule.

Phase 1 pretrains on still frames turned into short pseudo-clips by random
affine deformation; phase 2 trains on real clips sampled from videos, with
memory propagated through the clip and gradients flowing through the
recurrent compressor. The loss everywhere is dice + bootstrapped
cross-entropy with equal weights, optimized by decoupled-weight-decay Adam.

Default learning rates and weight decays follow the full-scale recipe
(4e-4/0.03 for pretraining, 2e-4/0.07 for main training, batch 16 for
100,100 steps per phase); the step counts and batch size here are scaled to
desk size through TrainConfig.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SequenceRecord
from .errors import MemvosError, ValidationError
from .memory import init_memory, update_memory
from .model import SegModel, prep_image, window_keep_mask
from .modes import Box

DICE_EPS = 1.0


@dataclass(frozen=True)
class TrainConfig:
    phase: str                      # pretrain-static | main-video
    learning_rate: float
    weight_decay: float
    steps: int
    batch_size: int = 2
    clip_length: int = 3
    seed: int = 0
    keep_fraction: float = 0.4      # bootstrap floor after warmup from 1.0
    keep_warmup_frac: float = 0.4   # fraction of steps to anneal 1.0 -> floor
    window_aug_prob: float = 0.25   # train-time oracle-window exposure
    teacher_mask_prob: float = 0.35  # update memory from groundtruth instead
                                     # of the soft prediction (keeps hard and
                                     # oracle-fed masks in distribution)
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.phase not in ("pretrain-static", "main-video"):
            raise ValidationError(f"unknown phase {self.phase!r}")
        if self.learning_rate <= 0 or self.steps <= 0:
            raise ValidationError("learning rate and steps must be positive")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ValidationError("keep fraction must be in (0, 1]")


def default_phase1(**over) -> TrainConfig:
    return replace(TrainConfig("pretrain-static", 4e-4, 0.03, steps=900,
                               batch_size=2, clip_length=3, seed=11), **over)


def default_phase2(**over) -> TrainConfig:
    return replace(TrainConfig("main-video", 2e-4, 0.07, steps=1400,
                               batch_size=2, clip_length=5, seed=12), **over)


# ---------------------------------------------------------------------------
# losses

def dice_loss(logits, target, object_id: int = 1, eps: float = DICE_EPS):
    """Soft dice on sigmoid(logits) against the object's binary mask:
    1 - (2|P.G| + eps) / (|P| + |G| + eps)."""
    z = ad.as_tensor(logits)
    g = np.asarray(target) == object_id
    if z.shape != g.shape:
        raise ValidationError(f"logits {z.shape} vs target {g.shape}")
    p = ad.sigmoid(z)
    gt = Tensor(g.astype(z.dtype))
    inter = ad.sum_(ad.mul(p, gt))
    denom = ad.sum_(p) + float(g.sum())
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bootstrapped_ce(logits, target, keep_fraction: float = 1.0):
    """Mean of the hardest keep-fraction of per-pixel cross-entropy terms.

    `logits` is a (C, H, W) stack of class log-odds (row 0 = background) and
    `target` an (H, W) grid of class indices."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValidationError(f"keep fraction must be in (0,1], got "
                              f"{keep_fraction}")
    z = ad.as_tensor(logits)
    tgt = np.asarray(target)
    if z.ndim != 3 or z.shape[1:] != tgt.shape:
        raise ValidationError(f"logit stack {z.shape} vs target {tgt.shape}")
    p = ad.softmax(z, axis=0)
    onehot = np.zeros(z.shape, dtype=z.dtype)
    np.put_along_axis(onehot, tgt[None].astype(np.int64), 1.0, axis=0)
    nll = -ad.sum_(ad.mul(ad.log(ad.clamp(p, 1e-7, 1.0)), Tensor(onehot)),
                   axis=0)
    k = max(1, int(math.ceil(keep_fraction * tgt.size)))
    return ad.topk_mean(nll, k)


def _binary_stack(z: Tensor) -> Tensor:
    """(H, W) foreground logit -> (2, H, W) class log-odds [background;
    foreground]."""
    zr = ad.reshape(z, (1,) + z.shape)
    return ad.concat([-zr, zr], axis=0)


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, named_params, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.wd * p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_gradients(named_params, max_norm: float) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in named_params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_at(step: int, total: int, base: float, warmup_frac: float = 0.05,
          floor: float = 0.05) -> float:
    warm = max(1, int(total * warmup_frac))
    if step < warm:
        return base * (step + 1) / warm
    u = (step - warm) / max(1, total - warm)
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * u)))


# ---------------------------------------------------------------------------
# clip assembly

@dataclass
class Clip:
    images: np.ndarray   # (T, H, W, 3) uint8
    masks: np.ndarray    # (T, H, W) uint8 object-id grids
    object_id: int


def random_affine(image: np.ndarray, mask: np.ndarray,
                  rng: np.random.Generator, magnitude: float):
    """Jointly warp an image (bilinear) and its mask (nearest)."""
    h, w = mask.shape
    theta = rng.uniform(-0.15, 0.15) * magnitude
    scale = 1.0 + rng.uniform(-0.12, 0.12) * magnitude
    ty = rng.uniform(-6.0, 6.0) * magnitude
    tx = rng.uniform(-6.0, 6.0) * magnitude
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: destination -> source
    ys = (yy - cy - ty)
    xs = (xx - cx - tx)
    ct, st = np.cos(-theta), np.sin(-theta)
    sy = (ys * ct - xs * st) / scale + cy
    sx = (ys * st + xs * ct) / scale + cx
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy, 0, h - 1) - y0
    fx = np.clip(sx, 0, w - 1) - x0
    img = image.astype(np.float64)
    out = (img[y0, x0] * ((1 - fy) * (1 - fx))[..., None]
           + img[y0, x1] * ((1 - fy) * fx)[..., None]
           + img[y1, x0] * (fy * (1 - fx))[..., None]
           + img[y1, x1] * (fy * fx)[..., None])
    yn = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
    xn = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
    return (np.clip(out + 0.5, 0, 255).astype(np.uint8), mask[yn, xn])


def _visible_frames(rec: SequenceRecord, oid: int) -> np.ndarray:
    return np.nonzero(rec.visibility[oid])[0]


def sample_static_clip(records, rng, clip_length: int) -> Clip:
    """Phase-1 sample: one still frame deformed into a pseudo-clip."""
    rec = records[rng.integers(0, len(records))]
    oid = int(rec.object_ids[rng.integers(0, len(rec.object_ids))])
    frames = _visible_frames(rec, oid)
    t = int(frames[rng.integers(0, len(frames))])
    base_img, base_mask = rec.image(t), rec.groundtruth[t]
    imgs, masks = [base_img], [base_mask]
    for k in range(1, clip_length):
        im, mk = random_affine(base_img, base_mask, rng, magnitude=k / 1.5)
        imgs.append(im)
        masks.append(mk)
    return Clip(np.stack(imgs), np.stack(masks), oid)


def sample_video_clip(records, rng, clip_length: int) -> Clip:
    """Phase-2 sample: a strided clip whose first frame shows the object.

    Sequences with long invisible gaps sometimes yield gap-spanning clips
    (visible, hidden..., reappeared) so the compressor learns to hold the
    target across absences."""
    rec = records[rng.integers(0, len(records))]
    oid = int(rec.object_ids[rng.integers(0, len(rec.object_ids))])
    vis = rec.visibility[oid]
    n = rec.num_frames
    events = _gap_events(vis, min_gap=40)
    if events and rng.uniform() < 0.5:
        t_r, gap_start = events[rng.integers(0, len(events))]
        first = int(max(0, gap_start - 1 - rng.integers(0, 12)))
        mids = np.linspace(gap_start, t_r - 1, clip_length - 2).astype(int)
        idx = [first, *mids.tolist(), t_r]
    else:
        stride = int(rng.integers(1, 4))
        starts = np.nonzero(vis[:max(1, n - stride * (clip_length - 1))])[0]
        if starts.size == 0:
            starts = np.nonzero(vis)[0]
        s = int(starts[rng.integers(0, len(starts))])
        idx = [min(n - 1, s + stride * k) for k in range(clip_length)]
    return Clip(np.stack([rec.image(t) for t in idx]),
                np.stack([rec.groundtruth[t] for t in idx]), oid)


def _gap_events(vis: np.ndarray, min_gap: int) -> list[tuple[int, int]]:
    """(reappearance frame, gap start) pairs for gaps of at least min_gap."""
    events, gap = [], 0
    for t, v in enumerate(vis):
        if not v:
            gap += 1
        else:
            if gap >= min_gap:
                events.append((t, t - gap))
            gap = 0
    return events


# ---------------------------------------------------------------------------
# the clip forward pass (shared by training and the gradient checks)

def clip_loss(model: SegModel, clips: list[Clip], keep_fraction: float,
              window_flags: list[list[bool]] | None = None,
              teacher_flags: list[list[bool]] | None = None) -> Tensor:
    """Total loss of a batch of single-object clips.

    Frame 0 seeds the memory from groundtruth; every later frame is
    segmented, scored against its mask, and folded back into memory through
    the soft predicted mask, so gradients reach the compressor. When
    `window_flags[b][t]` is set, that sample's attention is restricted to its
    groundtruth box at that frame (empty groundtruth suppresses the readout
    entirely), mirroring the oracle-box code path; `teacher_flags[b][t]`
    swaps the groundtruth mask into that sample's memory update, mirroring
    the oracle-mask path and the hard masks used at inference.
    """
    dtype = next(model.params()).dtype
    tn = len(clips[0].images)
    h, w = clips[0].masks.shape[1:]
    fg = [c.object_id for c in clips]

    def images_t(t):
        arr = np.concatenate([prep_image(c.images[t]) for c in clips])
        return Tensor(arr.astype(dtype, copy=False))

    def binary_t(t):
        arr = np.stack([(c.masks[t] == c.object_id) for c in clips])
        return arr.astype(dtype)

    m0 = Tensor(binary_t(0)[:, None])
    state = init_memory(model.encode_memory_t(images_t(0), m0))
    losses = []
    for t in range(1, tn):
        img = images_t(t)
        f_q, skips = model.encode_query_t(img)
        keep = _batched_keep(clips, t, window_flags, h, w, dtype)
        gamma = model.match_t(f_q, state, keep=keep)
        logits = model.decode_t(gamma, skips, (h, w))
        soft = ad.sigmoid(logits)
        z = ad.reshape(logits, (len(clips), h, w))
        for b in range(len(clips)):
            zb = _row(z, b)
            target = clips[b].masks[t]
            losses.append(dice_loss(zb, target, fg[b]))
            losses.append(bootstrapped_ce(_binary_stack(zb),
                                          (target == fg[b]).astype(np.int64),
                                          keep_fraction))
        upd_mask = soft
        if teacher_flags is not None and any(f[t] for f in teacher_flags):
            gt_bin = binary_t(t)[:, None]
            forced = np.array([[[[1.0]]] if f[t] else [[[0.0]]]
                               for f in teacher_flags], dtype=dtype)
            mixed = ad.add(ad.mul(Tensor(1.0 - forced), soft),
                           Tensor(forced * gt_bin))
            upd_mask = mixed
        f_new = model.encode_memory_t(img, upd_mask)
        state = update_memory(state, f_new, model.gru)
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def _row(z: Tensor, b: int) -> Tensor:
    """Select batch row b of a (B, H, W) tensor (differentiably)."""
    bsz, h, w = z.shape
    sel = np.zeros((1, bsz), dtype=z.dtype)
    sel[0, b] = 1.0
    flat = ad.reshape(z, (bsz, h * w))
    return ad.reshape(ad.matmul(Tensor(sel), flat), (h, w))


def _batched_keep(clips, t, window_flags, h, w, dtype):
    if window_flags is None or not any(f[t] for f in window_flags):
        return None
    from .model import feature_hw
    fh, fw = feature_hw(h, w)
    rows = []
    for b, clip in enumerate(clips):
        keep = None
        if window_flags[b][t]:
            box = Box.from_mask(clip.masks[t] == clip.object_id)
            keep = window_keep_mask(box, h, w, suppress_all=box is None)
        rows.append(np.ones((1, fh * fw, 1), dtype=np.float32)
                    if keep is None else keep.data)
    return Tensor(np.concatenate(rows).astype(dtype))


# ---------------------------------------------------------------------------
# the schedules

def keep_at(step: int, cfg: TrainConfig) -> float:
    warm = max(1, int(cfg.steps * cfg.keep_warmup_frac))
    if step >= warm:
        return cfg.keep_fraction
    u = step / warm
    return 1.0 + (cfg.keep_fraction - 1.0) * u


def run_phase(model: SegModel, records: list[SequenceRecord],
              cfg: TrainConfig, log=None) -> list[dict]:
    """One optimization phase; returns the per-step training curve."""
    if not records:
        raise ValidationError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(list(model.named_params()), cfg.learning_rate,
                cfg.weight_decay)
    sampler = (sample_static_clip if cfg.phase == "pretrain-static"
               else sample_video_clip)
    history = []
    for step in range(cfg.steps):
        clips = [sampler(records, rng, cfg.clip_length)
                 for _ in range(cfg.batch_size)]
        flags = [[rng.uniform() < cfg.window_aug_prob
                  for _ in range(cfg.clip_length)] for _ in clips]
        teacher = [[rng.uniform() < cfg.teacher_mask_prob
                    for _ in range(cfg.clip_length)] for _ in clips]
        keep = keep_at(step, cfg)
        loss = clip_loss(model, clips, keep, flags, teacher)
        value = loss.item()
        if not math.isfinite(value):
            raise MemvosError(
                f"{cfg.phase}: loss became non-finite at step {step} "
                f"(lr={lr_at(step, cfg.steps, cfg.learning_rate):.2e})")
        opt.zero_grad()
        loss.backward()
        clip_gradients(opt.params, cfg.grad_clip)
        opt.step(lr_at(step, cfg.steps, cfg.learning_rate))
        row = {"phase": cfg.phase, "step": step, "loss": value,
               "keep": keep,
               "lr": lr_at(step, cfg.steps, cfg.learning_rate)}
        history.append(row)
        if log and (step % 50 == 0 or step == cfg.steps - 1):
            log(f"{cfg.phase} step {step}/{cfg.steps} loss {value:.4f}")
    return history


def train(model: SegModel, records: list[SequenceRecord],
          phase1: TrainConfig | None = None,
          phase2: TrainConfig | None = None, log=None):
    """Two-phase schedule; returns (model, full training curve)."""
    phase1 = phase1 or default_phase1()
    phase2 = phase2 or default_phase2()
    history = run_phase(model, records, phase1, log)
    history += run_phase(model, records, phase2, log)
    return model, history


def finetune(model: SegModel, records: list[SequenceRecord], epochs: int = 2,
             learning_rate: float = 5e-4, seed: int = 21,
             clips_per_sequence: int = 6, log=None):
    """Continue video-phase training on new sequences; 0 epochs is a no-op."""
    if epochs < 0:
        raise ValidationError("epochs must be >= 0")
    if epochs == 0:
        return model, []
    steps = max(1, epochs * len(records) * clips_per_sequence)
    cfg = default_phase2(steps=steps, learning_rate=learning_rate, seed=seed)
    return model, run_phase(model, records, cfg, log)
