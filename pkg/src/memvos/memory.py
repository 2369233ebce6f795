"""The three fixed-size memory banks and the recurrent compressor.

A MemoryState holds exactly three stride-16 feature maps of identical shape:

  reference  frozen features of frame 1 with its groundtruth mask; never
             written again, enables re-detection after disappearance
  global     a recurrent running summary of all older frames
  local      the features of the immediately previous frame and its mask

Per-frame update: the displaced local feature is folded into the global bank
by a convolutional gated recurrent cell, and the new frame becomes the local
bank. The element count is therefore constant for any video length.

State fields are either plain ndarrays (inference) or autodiff Tensors
(training, so gradients flow through the compressor); both go through the
same update code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import FormatError, ValidationError

_MAGIC = b"MVMS"
_STATE_VERSION = 1


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class MemoryState:
    reference: np.ndarray | Tensor
    global_: np.ndarray | Tensor
    local: np.ndarray | Tensor
    frames_absorbed: int = 1

    def __post_init__(self):
        shapes = {tuple(_raw(b).shape) for b in (self.reference, self.global_,
                                                 self.local)}
        if len(shapes) != 1:
            raise ValidationError(f"memory banks differ in shape: {shapes}")


class ConvGRU(nn.Module):
    """Convolutional gated recurrent cell over (C, h, w) feature maps.

    z = sigmoid(conv_z([state; input]))
    r = sigmoid(conv_r([state; input]))
    c = tanh(conv_c([r * state; input]))
    out = (1 - z) * state + z * c

    Gate biases start at zero so the update gate opens halfway (z = 0.5) at
    initialization.
    """

    def __init__(self, rng: np.random.Generator, channels: int,
                 kernel: int = 3):
        super().__init__()
        self.channels = channels
        self.conv_z = nn.Conv2d(rng, 2 * channels, channels, kernel)
        self.conv_r = nn.Conv2d(rng, 2 * channels, channels, kernel)
        self.conv_c = nn.Conv2d(rng, 2 * channels, channels, kernel)

    def __call__(self, state: Tensor, inp: Tensor) -> Tensor:
        both = ad.concat([state, inp], axis=1)
        z = ad.sigmoid(self.conv_z(both))
        r = ad.sigmoid(self.conv_r(both))
        cand = ad.tanh(self.conv_c(ad.concat([ad.mul(r, state), inp], axis=1)))
        return ad.add(ad.mul(1.0 - z, state), ad.mul(z, cand))


def _as_batched_tensor(x) -> tuple[Tensor, bool, bool]:
    """Wrap ndarray/Tensor as a (B, C, h, w) Tensor; remember how to undo."""
    was_array = not isinstance(x, Tensor)
    t = ad.as_tensor(np.asarray(x, dtype=np.float32) if was_array else x)
    was_3d = t.ndim == 3
    if was_3d:
        t = ad.reshape(t, (1,) + t.shape)
    elif t.ndim != 4:
        raise ValidationError(f"feature map must be (C,h,w) or (B,C,h,w), "
                              f"got shape {t.shape}")
    return t, was_array, was_3d


def _undo(t: Tensor, was_array: bool, was_3d: bool):
    if was_3d:
        t = ad.reshape(t, t.shape[1:])
    return t.data if was_array else t


def recurrent_compress(state, inp, gru: ConvGRU):
    """One step of the global-memory compressor. Shape-preserving."""
    st, arr, b3 = _as_batched_tensor(state)
    it, _, _ = _as_batched_tensor(inp)
    if st.shape != it.shape:
        raise ValidationError(f"state/input shapes differ: {st.shape} vs "
                              f"{it.shape}")
    return _undo(gru(st, it), arr, b3)


def init_memory(f_first) -> MemoryState:
    """Seed all three banks from the frame-1 memory feature."""
    if not np.all(np.isfinite(_raw(f_first))):
        raise ValidationError("memory feature contains non-finite values")
    if isinstance(f_first, Tensor):
        ref, glo, loc = f_first, f_first, f_first
    else:
        f = np.array(f_first, dtype=np.float32)
        ref, glo, loc = f, f.copy(), f.copy()
    return MemoryState(reference=ref, global_=glo, local=loc,
                       frames_absorbed=1)


def update_memory(state: MemoryState, f_new, gru: ConvGRU) -> MemoryState:
    """Fold the displaced local bank into global memory, then store the new
    frame's feature as the local bank. The reference bank never changes."""
    if _raw(f_new).shape != _raw(state.local).shape:
        raise ValidationError(
            f"new feature shape {_raw(f_new).shape} does not match banks "
            f"{_raw(state.local).shape}")
    new_global = recurrent_compress(state.global_, state.local, gru)
    return replace(state, global_=new_global, local=f_new,
                   frames_absorbed=state.frames_absorbed + 1)


def memory_footprint(state: MemoryState) -> int:
    """Total stored real values across the three banks."""
    return int(_raw(state.reference).size + _raw(state.global_).size
               + _raw(state.local).size)


def state_to_bytes(state: MemoryState) -> bytes:
    """Checkpoint blob: header (magic, version, C, h, w, frames absorbed)
    followed by the three banks as little-endian float32 in the fixed order
    reference, global, local."""
    banks = [_raw(b).astype("<f4") for b in (state.reference, state.global_,
                                             state.local)]
    c, h, w = banks[0].shape
    head = _MAGIC + struct.pack("<IIIIQ", _STATE_VERSION, c, h, w,
                                state.frames_absorbed)
    return head + b"".join(b.tobytes() for b in banks)


def state_from_bytes(blob: bytes) -> MemoryState:
    if blob[:4] != _MAGIC:
        raise FormatError("not a memory-state blob (bad magic)")
    version, c, h, w, absorbed = struct.unpack("<IIIIQ", blob[4:28])
    if version != _STATE_VERSION:
        raise FormatError(f"unsupported memory-state version {version}")
    n = c * h * w * 4
    body = blob[28:]
    if len(body) != 3 * n:
        raise FormatError("memory-state blob truncated")
    banks = [np.frombuffer(body[i * n:(i + 1) * n], dtype="<f4")
             .reshape(c, h, w).copy() for i in range(3)]
    return MemoryState(reference=banks[0], global_=banks[1], local=banks[2],
                       frames_absorbed=absorbed)
