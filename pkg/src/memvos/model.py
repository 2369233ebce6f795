"""The segmentation network: shared query/memory encoder, an attention
matcher over the three memory banks, and a feature-pyramid decoder.

Dataflow per frame: encode the image once, let every tracked object attend
from the query feature to its own (reference, global, local) banks, decode a
full-resolution foreground logit per object, fuse objects by soft
aggregation, then refresh each object's memory with the newly encoded frame.

The encoder is a four-stage strided convnet (stride 16 total). The memory
path shares all image weights with the query path and injects the object
mask through small per-stage projections, so an all-background mask encodes
exactly like the plain image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import FormatError, ProtocolError, ValidationError
from .memory import ConvGRU, MemoryState, init_memory, update_memory
from .modes import ALL_BANKS, BankCombo, Box, OracleMode

CHECKPOINT_VERSION = 1
STRIDE = 16  # four stages of stride 2


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    heads: int = 4
    matcher_layers: int = 3
    enc_widths: tuple[int, int, int] = (16, 24, 32)
    dec_widths: tuple[int, int, int] = (24, 16, 12)
    ffn_mult: int = 2
    pe_grid: int = 6
    gru_kernel: int = 3
    object_capacity: int = 255

    def __post_init__(self):
        if self.matcher_layers < 1:
            raise ValidationError("matcher needs at least one layer")
        if self.channels % self.heads != 0:
            raise ValidationError(
                f"channels ({self.channels}) must divide evenly into "
                f"{self.heads} heads")
        if len(self.enc_widths) != 3 or len(self.dec_widths) != 3:
            raise ValidationError("expected 3 encoder and 3 decoder widths")

    @property
    def stride(self) -> int:
        return STRIDE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("enc_widths", "dec_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def feature_hw(height: int, width: int) -> tuple[int, int]:
    """Stride-16 spatial size (ceiling rule)."""
    return (height + STRIDE - 1) // STRIDE, (width + STRIDE - 1) // STRIDE


class Encoder(nn.Module):
    """Shared backbone; the mask enters through bias-free 1x1 side convs."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        widths = (*cfg.enc_widths, cfg.channels)
        cin = 3
        convs, mask_projs, norms = [], [], []
        for w in widths:
            convs.append(nn.Conv2d(rng, cin, w, k=3, stride=2))
            mask_projs.append(nn.Conv2d(rng, 1, w, k=1, bias=False))
            norms.append(nn.LayerNorm(w))
            cin = w
        self.convs = convs
        self.mask_projs = mask_projs
        self.norms = norms

    def __call__(self, images: Tensor, mask: Tensor | None = None):
        """images (B,3,H,W); mask (B,1,H,W) in [0,1] or None.
        Returns the per-stage feature list [stride2, stride4, stride8,
        stride16]."""
        feats = []
        x = images
        for i, (conv, proj, ln) in enumerate(zip(self.convs, self.mask_projs,
                                                 self.norms)):
            x = conv(x)
            if mask is not None:
                x = ad.add(x, proj(ad.avgpool2d(mask, 2 ** (i + 1))))
            x = nn.channel_norm(x, ln)
            x = ad.leaky_relu(x, 0.1)
            feats.append(x)
        return feats


class MatcherLayer(nn.Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.heads = cfg.heads
        self.ln_q = nn.LayerNorm(c)
        self.ln_m = nn.LayerNorm(c)
        self.ln_f = nn.LayerNorm(c)
        self.wq = nn.Linear(rng, c, c)
        self.wk = nn.Linear(rng, c, c)
        self.wv = nn.Linear(rng, c, c)
        self.wo = nn.Linear(rng, c, c)
        self.ff1 = nn.Linear(rng, c, cfg.ffn_mult * c)
        self.ff2 = nn.Linear(rng, cfg.ffn_mult * c, c)

    def __call__(self, x: Tensor, mem: Tensor, keep: Tensor | None) -> Tensor:
        b, nq, c = x.shape
        nm = mem.shape[1]
        h = self.heads
        dh = c // h

        def split(t, n):
            t = ad.reshape(t, (b, n, h, dh))
            t = ad.transpose(t, (0, 2, 1, 3))
            return ad.reshape(t, (b * h, n, dh))

        q = split(self.wq(self.ln_q(x)), nq)
        kv = self.ln_m(mem)
        k = split(self.wk(kv), nm)
        v = split(self.wv(kv), nm)
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        ctx = ad.matmul(ad.softmax(scores, -1), v)
        ctx = ad.reshape(ctx, (b, h, nq, dh))
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, nq, c))
        out = self.wo(ctx)
        if keep is not None:
            out = ad.mul(out, keep)  # zero readout for suppressed queries
        x = ad.add(x, out)
        x = ad.add(x, self.ff2(ad.relu(self.ff1(self.ln_f(x)))))
        return x


class Matcher(nn.Module):
    """Stacked cross-attention from query positions over the concatenated
    positions of the enabled memory banks. Learned positional encodings are
    shared between query and memory grids; per-bank embeddings let the layers
    tell reference, global, and local tokens apart."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        g = cfg.pe_grid
        self.pe = nn.param(rng, (g * g, c), 0.02)
        self.grid = g
        self.emb_reference = nn.param(rng, (c,), 0.02)
        self.emb_global = nn.param(rng, (c,), 0.02)
        self.emb_local = nn.param(rng, (c,), 0.02)
        self.layers = [MatcherLayer(rng, cfg) for _ in range(cfg.matcher_layers)]

    def _pos(self, h: int, w: int) -> Tensor:
        g = self.grid
        pe = ad.transpose(ad.reshape(self.pe, (1, g, g, -1)), (0, 3, 1, 2))
        pe = ad.bilinear_resize(pe, (h, w))
        pe = ad.reshape(ad.transpose(pe, (0, 2, 3, 1)), (1, h * w, -1))
        return pe

    @staticmethod
    def _tokens(fmap: Tensor) -> Tensor:
        b, c, h, w = fmap.shape
        return ad.reshape(ad.transpose(fmap, (0, 2, 3, 1)), (b, h * w, c))

    def __call__(self, f_q: Tensor, banks: list[tuple[str, Tensor]],
                 keep: Tensor | None = None) -> Tensor:
        b, c, h, w = f_q.shape
        pe = self._pos(h, w)
        x = ad.add(self._tokens(f_q), pe)
        embs = {"reference": self.emb_reference, "global": self.emb_global,
                "local": self.emb_local}
        mem = ad.concat(
            [ad.add(ad.add(self._tokens(f), pe), embs[name])
             for name, f in banks], axis=1)
        for layer in self.layers:
            x = layer(x, mem, keep)
        return ad.transpose(ad.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


class Decoder(nn.Module):
    """Feature-pyramid upsampling with skip connections, to a single
    foreground logit at full resolution. Edge padding keeps spatially
    constant inputs exactly constant."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d = cfg.dec_widths
        self.top = nn.Conv2d(rng, cfg.channels, d[0], k=3, pad_mode="edge")
        skip_widths = cfg.enc_widths[::-1]  # stride 8, 4, 2
        self.mixes = [nn.Conv2d(rng, d[max(0, i - 1)], d[i], k=3,
                                pad_mode="edge") for i in range(3)]
        self.lats = [nn.Conv2d(rng, skip_widths[i], d[i], k=1,
                               pad_mode="edge") for i in range(3)]
        self.head = nn.Conv2d(rng, d[2], 1, k=3, pad_mode="edge")

    def __call__(self, gamma: Tensor, skips: list[Tensor],
                 out_hw: tuple[int, int]) -> Tensor:
        x = ad.leaky_relu(self.top(gamma), 0.1)
        for mix, lat, skip in zip(self.mixes, self.lats, reversed(skips)):
            x = ad.bilinear_resize(x, skip.shape[2:])
            x = ad.leaky_relu(ad.add(mix(x), lat(skip)), 0.1)
        return ad.bilinear_resize(self.head(x), out_hw)


class SegModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng, self.cfg)
        self.matcher = Matcher(rng, self.cfg)
        self.decoder = Decoder(rng, self.cfg)
        self.gru = ConvGRU(rng, self.cfg.channels, self.cfg.gru_kernel)

    # ------------------------------------------------------------------
    # batched internals (Tensor in, Tensor out) used by training and eval

    def encode_query_t(self, images: Tensor):
        feats = self.encoder(images, None)
        return feats[-1], feats[:-1]

    def encode_memory_t(self, images: Tensor, masks: Tensor) -> Tensor:
        return self.encoder(images, masks)[-1]

    def match_t(self, f_q: Tensor, state, combo: BankCombo = ALL_BANKS,
                keep: Tensor | None = None) -> Tensor:
        banks = []
        if combo.reference:
            banks.append(("reference", _bank_tensor(state.reference)))
        if combo.global_:
            banks.append(("global", _bank_tensor(state.global_)))
        if combo.local:
            banks.append(("local", _bank_tensor(state.local)))
        return self.matcher(f_q, banks, keep)

    def decode_t(self, gamma: Tensor, skips: list[Tensor],
                 out_hw: tuple[int, int]) -> Tensor:
        return self.decoder(gamma, skips, out_hw)

    # ------------------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        meta = json.dumps({"version": CHECKPOINT_VERSION,
                           "config": self.cfg.to_dict()})
        np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8),
                 **self.state_dict())

    @classmethod
    def load_checkpoint(cls, path) -> "SegModel":
        with np.load(path) as z:
            if "__meta__" not in z:
                raise FormatError(f"{path}: not a model checkpoint")
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FormatError(
                    f"unsupported checkpoint version {meta.get('version')}")
            model = cls(ModelConfig.from_dict(meta["config"]))
            model.load_state_dict({k: z[k] for k in z.files
                                   if k != "__meta__"})
        return model


def _bank_tensor(bank) -> Tensor:
    t = ad.as_tensor(bank)
    return ad.reshape(t, (1,) + t.shape) if t.ndim == 3 else t


def prep_image(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 or [0,1] float -> zero-centered float32 (1,3,H,W)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValidationError(f"degenerate image size {img.shape[:2]}")
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    return (img.astype(np.float32) * 2.0 - 1.0).transpose(2, 0, 1)[None]


def prep_mask(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float32)
    if m.ndim != 2:
        raise ValidationError(f"expected an (H, W) mask, got {m.shape}")
    return m[None, None]


# ---------------------------------------------------------------------------
# public single-frame operations (ndarray in / ndarray out)

def encode_query(model: SegModel, image: np.ndarray):
    """Image -> (stride-16 feature (C,h,w), low-level skip features)."""
    f, skips = model.encode_query_t(Tensor(prep_image(image)))
    return f.data[0], [s.data[0] for s in skips]

def encode_memory(model: SegModel, image: np.ndarray, mask: np.ndarray,
                  object_id: int) -> np.ndarray:
    """Image + object mask -> stride-16 memory feature, image weights shared
    with encode_query."""
    img = prep_image(image)
    m = np.asarray(mask)
    if m.shape[:2] != np.asarray(image).shape[:2]:
        raise ValidationError(
            f"mask {m.shape} does not match image {np.asarray(image).shape[:2]}")
    binary = (m == object_id).astype(np.float32)
    return model.encode_memory_t(Tensor(img), Tensor(prep_mask(binary))).data[0]


def window_keep_mask(window: Box | None, height: int, width: int,
                     suppress_all: bool = False) -> Tensor | None:
    """Map a pixel box onto the stride-16 grid: a query cell stays active iff
    it intersects the window. Returns None when nothing is suppressed (so the
    no-window code path is taken bit for bit)."""
    h, w = feature_hw(height, width)
    if suppress_all:
        return Tensor(np.zeros((1, h * w, 1), dtype=np.float32))
    if window is None:
        return None
    keep = np.zeros((h, w), dtype=np.float32)
    cy0, cy1 = window.y0 // STRIDE, (window.y1 - 1) // STRIDE + 1
    cx0, cx1 = window.x0 // STRIDE, (window.x1 - 1) // STRIDE + 1
    keep[max(0, cy0):min(h, cy1), max(0, cx0):min(w, cx1)] = 1.0
    if keep.all():
        return None
    if not keep.any():
        raise ValidationError(f"search window {window} lies outside the image")
    return Tensor(keep.reshape(1, h * w, 1))


def match(model: SegModel, f_q: np.ndarray, state: MemoryState,
          combo: BankCombo = ALL_BANKS, window: Box | None = None,
          image_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Attend from the query feature over the enabled banks; optionally
    restrict the search to a pixel window (oracle-box mode)."""
    fq = _bank_tensor(f_q)
    if fq.shape[1:] != _bank_tensor(state.local).shape[1:]:
        raise ValidationError(
            f"query feature {fq.shape} does not match memory banks")
    keep = None
    if window is not None:
        if image_hw is None:
            image_hw = (fq.shape[2] * STRIDE, fq.shape[3] * STRIDE)
        keep = window_keep_mask(window, *image_hw)
    return model.match_t(fq, state, combo, keep).data[0]


def decode(model: SegModel, gamma: np.ndarray, skips,
           out_hw: tuple[int, int]) -> np.ndarray:
    """Matched feature + skip features -> full-resolution foreground logit."""
    g = _bank_tensor(gamma)
    sk = [_bank_tensor(s) for s in skips]
    return model.decode_t(g, sk, out_hw).data[0, 0]


@dataclass
class SegmentationResult:
    object_ids: tuple[int, ...]
    probabilities: np.ndarray  # (K+1, H, W), row 0 = background; sums to 1
    logits: np.ndarray         # aggregated per-class log odds, same shape
    mask: np.ndarray           # (H, W) uint8 argmax object-id map
    per_object_logits: dict[int, np.ndarray] = field(default_factory=dict)


def soft_aggregate(prob_maps: dict[int, np.ndarray]) -> SegmentationResult:
    """Fuse per-object foreground probabilities into one pixel distribution.

    Background is the product of the per-object complements; the stacked
    probabilities are renormalized through their log odds so the result sums
    to one per pixel. Ties at the argmax go to background, then lower ids.
    """
    if not prob_maps:
        raise ValidationError("need at least one object probability map")
    ids = tuple(sorted(prob_maps))
    stack = np.stack([np.asarray(prob_maps[i], dtype=np.float32) for i in ids])
    if stack.ndim != 3:
        raise ValidationError("probability maps must be 2-D and equally sized")
    if stack.min() < 0.0 or stack.max() > 1.0:
        raise ValidationError("probabilities must lie in [0, 1]")
    bg = np.prod(1.0 - stack, axis=0, keepdims=True)
    full = np.clip(np.concatenate([bg, stack], axis=0), 1e-7, 1.0 - 1e-7)
    logits = np.log(full / (1.0 - full))
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=0, keepdims=True)
    lut = np.array([0, *ids], dtype=np.uint8)
    mask = lut[np.argmax(probs, axis=0)]
    return SegmentationResult(ids, probs, logits, mask)


def segment_frame(model: SegModel, states: dict[int, MemoryState],
                  image: np.ndarray, oracle: OracleMode = OracleMode.NONE,
                  gt_mask: np.ndarray | None = None,
                  combo: BankCombo = ALL_BANKS):
    """Segment one frame and advance every object's memory.

    Oracle-box restricts each object's attention to its groundtruth box (an
    absent object gets its readout fully suppressed); oracle-mask swaps the
    groundtruth mask for the prediction in the memory update only. Returns
    (SegmentationResult, new states dict).
    """
    if not states:
        raise ProtocolError("segment_frame called before memory init")
    if oracle is not OracleMode.NONE and gt_mask is None:
        raise ValidationError(f"oracle mode {oracle.value} requires a "
                              f"groundtruth mask")
    img_arr = np.asarray(image)
    height, width = img_arr.shape[:2]
    img_t = Tensor(prep_image(image))
    f_q, skips = model.encode_query_t(img_t)

    probs: dict[int, np.ndarray] = {}
    per_logits: dict[int, np.ndarray] = {}
    for oid in sorted(states):
        keep = None
        if oracle.use_box:
            box = Box.from_mask(np.asarray(gt_mask) == oid)
            keep = window_keep_mask(box, height, width,
                                    suppress_all=box is None)
        gamma = model.match_t(f_q, states[oid], combo, keep)
        logit = model.decode_t(gamma, skips, (height, width)).data[0, 0]
        per_logits[oid] = logit
        probs[oid] = 1.0 / (1.0 + np.exp(-logit))
    result = soft_aggregate(probs)
    result.per_object_logits = per_logits

    new_states: dict[int, MemoryState] = {}
    for oid in sorted(states):
        source = gt_mask if oracle.use_mask else result.mask
        binary = (np.asarray(source) == oid).astype(np.float32)
        f_new = model.encode_memory_t(img_t, Tensor(prep_mask(binary)))
        new_states[oid] = update_memory(states[oid], f_new.data[0], model.gru)
    return result, new_states


def init_object_memories(model: SegModel, image: np.ndarray,
                         gt_mask: np.ndarray,
                         object_ids) -> dict[int, MemoryState]:
    """Build the per-object initial states from frame 1 and its groundtruth."""
    states = {}
    for oid in sorted(object_ids):
        states[oid] = init_memory(encode_memory(model, image, gt_mask, oid))
    return states
