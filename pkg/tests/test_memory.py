"""Memory banks and the recurrent compressor."""

import numpy as np
import pytest

from memvos.errors import FormatError, ValidationError
from memvos.memory import (ConvGRU, init_memory, memory_footprint,
                           recurrent_compress, state_from_bytes,
                           state_to_bytes, update_memory)


def make_gru(channels=4, kernel=3, seed=0):
    return ConvGRU(np.random.default_rng(seed), channels, kernel)


def rand_feat(rng, c=4, h=3, w=3):
    return rng.normal(size=(c, h, w)).astype(np.float32)


class TestInit:
    def test_three_identical_banks(self):
        rng = np.random.default_rng(0)
        f = rand_feat(rng)
        st = init_memory(f)
        np.testing.assert_array_equal(st.reference, f)
        np.testing.assert_array_equal(st.global_, f)
        np.testing.assert_array_equal(st.local, f)
        assert st.frames_absorbed == 1

    def test_zero_feature_valid(self):
        st = init_memory(np.zeros((2, 2, 2), np.float32))
        assert memory_footprint(st) == 24

    def test_nan_rejected(self):
        f = np.zeros((2, 2, 2), np.float32)
        f[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            init_memory(f)


class TestRecurrentCompress:
    def test_gate_closed_identity(self):
        # huge negative update-gate bias forces z = 0 -> output = state
        gru = make_gru()
        gru.conv_z.b.data[:] = -60.0
        rng = np.random.default_rng(1)
        state, inp = rand_feat(rng), rand_feat(rng)
        out = recurrent_compress(state, inp, gru)
        np.testing.assert_array_equal(out, state)

    def test_gate_open_candidate(self):
        # z = 1 and r = 1 -> output = tanh(conv_c([state; input]))
        gru = make_gru()
        gru.conv_z.b.data[:] = 60.0
        gru.conv_r.b.data[:] = 60.0
        rng = np.random.default_rng(2)
        state, inp = rand_feat(rng), rand_feat(rng)
        out = recurrent_compress(state, inp, gru)
        from memvos import autodiff as ad
        from memvos.autodiff import Tensor
        both = np.concatenate([state, inp])[None]
        cand = ad.tanh(gru.conv_c(Tensor(both))).data[0]
        np.testing.assert_allclose(out, cand, atol=1e-6)

    def test_scalar_oracle_1x1_kernels(self):
        # 1x1 kernels over a 1-channel 2x2 map: every pixel follows the
        # scalar gate equations, checked by direct arithmetic
        gru = ConvGRU(np.random.default_rng(3), 1, kernel=1)
        wz, uz = (float(gru.conv_z.w.data[0, i, 0, 0]) for i in (0, 1))
        wr, ur = (float(gru.conv_r.w.data[0, i, 0, 0]) for i in (0, 1))
        wc, uc = (float(gru.conv_c.w.data[0, i, 0, 0]) for i in (0, 1))
        rng = np.random.default_rng(4)
        state = rng.normal(size=(1, 2, 2)).astype(np.float32)
        inp = rng.normal(size=(1, 2, 2)).astype(np.float32)
        out = recurrent_compress(state, inp, gru)

        def sig(x):
            return 1.0 / (1.0 + np.exp(-x))

        for i in range(2):
            for j in range(2):
                s, x = float(state[0, i, j]), float(inp[0, i, j])
                z = sig(wz * s + uz * x)
                r = sig(wr * s + ur * x)
                c = np.tanh(wc * (r * s) + uc * x)
                want = (1 - z) * s + z * c
                assert out[0, i, j] == pytest.approx(want, abs=1e-6)

    def test_shape_mismatch(self):
        gru = make_gru()
        with pytest.raises(ValidationError):
            recurrent_compress(np.zeros((4, 3, 3), np.float32),
                               np.zeros((4, 2, 3), np.float32), gru)

    def test_bounded_output(self):
        # convex combination of state and tanh candidate stays bounded
        rng = np.random.default_rng(5)
        for seed in range(5):
            gru = make_gru(seed=seed)
            state = np.clip(rand_feat(rng), -1, 1)
            inp = rand_feat(rng)
            out = recurrent_compress(state, inp, gru)
            assert np.abs(out).max() <= max(np.abs(state).max(), 1.0) + 1e-6


class TestUpdateProtocol:
    def test_one_update_trace(self):
        gru = make_gru()
        rng = np.random.default_rng(6)
        f1, f2 = rand_feat(rng), rand_feat(rng)
        st = init_memory(f1)
        st2 = update_memory(st, f2, gru)
        np.testing.assert_array_equal(st2.reference, f1)
        np.testing.assert_array_equal(st2.local, f2)
        # displaced local (= f1 right after init) feeds the compressor
        np.testing.assert_allclose(st2.global_,
                                   recurrent_compress(f1, f1, gru), atol=0)
        assert st2.frames_absorbed == 2

    def test_reference_immutable_many_updates(self):
        gru = make_gru()
        rng = np.random.default_rng(7)
        f1 = rand_feat(rng)
        st = init_memory(f1)
        for _ in range(100):
            st = update_memory(st, rand_feat(rng), gru)
        np.testing.assert_array_equal(st.reference, f1)
        assert st.frames_absorbed == 101

    def test_footprint_constant(self):
        gru = make_gru()
        rng = np.random.default_rng(8)
        st = init_memory(rand_feat(rng))
        base = memory_footprint(st)
        for k in range(50):
            st = update_memory(st, rand_feat(rng), gru)
            assert memory_footprint(st) == base

    def test_shape_mismatch(self):
        gru = make_gru()
        st = init_memory(np.zeros((4, 3, 3), np.float32))
        with pytest.raises(ValidationError):
            update_memory(st, np.zeros((4, 4, 3), np.float32), gru)


class TestFootprint:
    def test_arithmetic(self):
        st = init_memory(np.zeros((8, 4, 4), np.float32))
        assert memory_footprint(st) == 3 * 8 * 16

    def test_channel_doubling_doubles(self):
        a = init_memory(np.zeros((8, 4, 4), np.float32))
        b = init_memory(np.zeros((16, 4, 4), np.float32))
        assert memory_footprint(b) == 2 * memory_footprint(a)


class TestSerialization:
    def test_roundtrip(self):
        gru = make_gru()
        rng = np.random.default_rng(9)
        st = init_memory(rand_feat(rng))
        st = update_memory(st, rand_feat(rng), gru)
        blob = state_to_bytes(st)
        back = state_from_bytes(blob)
        np.testing.assert_array_equal(back.reference, st.reference)
        np.testing.assert_array_equal(back.global_, st.global_)
        np.testing.assert_array_equal(back.local, st.local)
        assert back.frames_absorbed == st.frames_absorbed

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            state_from_bytes(b"NOPE" + b"\x00" * 64)

    def test_truncated(self):
        st = init_memory(np.zeros((2, 2, 2), np.float32))
        blob = state_to_bytes(st)
        with pytest.raises(FormatError):
            state_from_bytes(blob[:-4])
