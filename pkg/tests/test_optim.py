import math

import numpy as np
import pytest

from galore_lite.errors import DimensionError, NumericError, ParameterError
from galore_lite.matcore import Rng, gaussian
from galore_lite.optim import (
    AdamHyper,
    GaLoreAdamState,
    adam_lowrank_update,
    adam_step,
    dequantize_moment,
    galore_step,
    init_adam_state,
    lowrank_moment_shape,
    quantize_moment,
)
from galore_lite.projector import ProjectionConfig


def hyper(lr=0.001, **kw):
    return AdamHyper(lr=lr, **kw)


class TestAdamLowrankUpdate:
    def test_first_step_hand_values(self):
        state = init_adam_state((1, 1))
        n, state2 = adam_lowrank_update(state, np.array([[2.0]]), hyper())
        # beta defaults: M = 0.2, V = 0.004; corrected M = 2, V = 4
        expected = 2.0 / (2.0 + 1e-8)
        assert abs(n[0, 0] - expected) <= 1e-15
        assert abs(n[0, 0] - 1.0) <= 1e-8
        assert state2.t == 1

    def test_zero_gradient_zero_direction(self):
        state = init_adam_state((3, 4))
        n, _ = adam_lowrank_update(state, np.zeros((3, 4)), hyper())
        assert np.array_equal(n, np.zeros((3, 4)))

    def test_constant_gradient_steady_state(self):
        r = np.array([[0.5, -2.0, 1e-3]])
        state = init_adam_state((1, 3))
        for _ in range(1000):
            n, state = adam_lowrank_update(state, r, hyper())
        assert np.max(np.abs(n - np.sign(r))) <= 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_lowrank_update(init_adam_state((2, 2)), np.zeros((2, 3)), hyper())

    def test_nonfinite_gradient_names_step(self):
        state = init_adam_state((1, 1))
        _, state = adam_lowrank_update(state, np.array([[1.0]]), hyper())
        with pytest.raises(NumericError, match="step 2"):
            adam_lowrank_update(state, np.array([[np.nan]]), hyper())

    def test_v_stays_nonnegative(self):
        state = init_adam_state((2, 2))
        rng = Rng(5)
        for _ in range(50):
            _, state = adam_lowrank_update(state, gaussian(rng, 2, 2), hyper())
            assert (state.v >= 0).all()


class TestBiasCorrectionSwitch:
    def test_off_matches_inline_equations(self):
        # two-step trace of the uncorrected update, by hand
        h = hyper(lr=0.01, bias_correction=False)
        g1 = np.array([[1.0]])
        g2 = np.array([[2.0]])
        state = init_adam_state((1, 1))
        n1, state = adam_lowrank_update(state, g1, h)
        m1 = (1.0 - 0.9) * 1.0
        v1 = (1.0 - 0.999) * 1.0
        assert abs(n1[0, 0] - m1 / (math.sqrt(v1) + 1e-8)) <= 1e-12
        n2, state = adam_lowrank_update(state, g2, h)
        m2 = 0.9 * m1 + (1.0 - 0.9) * 2.0
        v2 = 0.999 * v1 + (1.0 - 0.999) * 4.0
        assert abs(n2[0, 0] - m2 / (math.sqrt(v2) + 1e-8)) <= 1e-12

    def test_on_vs_off_first_step(self):
        # corrected first step is ~sign(g); uncorrected is (1-b1)/sqrt(1-b2)
        h_on = hyper()
        h_off = hyper(bias_correction=False)
        g = np.array([[0.7]])
        n_on, _ = adam_lowrank_update(init_adam_state((1, 1)), g, h_on)
        n_off, _ = adam_lowrank_update(init_adam_state((1, 1)), g, h_off)
        assert abs(n_on[0, 0] - 1.0) <= 1e-7
        m1 = (1.0 - 0.9) * 0.7
        v1 = (1.0 - 0.999) * 0.49
        assert abs(n_off[0, 0] - m1 / (math.sqrt(v1) + 1e-8)) <= 1e-12


class TestAdamStep:
    def test_single_step_approx_minus_lr(self):
        w = np.zeros((1, 1))
        w2, _ = adam_step(w, np.array([[1.0]]), init_adam_state((1, 1)), hyper(lr=0.05))
        assert abs(w2[0, 0] + 0.05) <= 0.05 * 1e-7

    def test_zero_gradient_never_moves(self):
        w = gaussian(Rng(1), 3, 3)
        state = init_adam_state((3, 3))
        cur = w
        for _ in range(5):
            cur, state = adam_step(cur, np.zeros((3, 3)), state, hyper())
        assert np.array_equal(cur, w)

    def test_quant8_tracks_full64(self):
        rng = Rng(7)
        w0 = gaussian(rng, 16, 32)
        grads = [gaussian(rng, 16, 32) for _ in range(10)]
        h = hyper(lr=0.01)
        w_full = w0.copy()
        st_full = init_adam_state((16, 32))
        w_q = w0.copy()
        st_q = init_adam_state((16, 32), storage="quant8")
        for g in grads:
            w_full, st_full = adam_step(w_full, g, st_full, h)
            w_q, st_q = adam_step(w_q, g, st_q, h)
        assert np.linalg.norm(w_q - w_full) <= 1e-2 * np.linalg.norm(w_full)


class TestGaLoreStep:
    def test_identity_projector_matches_adam_bitwise(self):
        rng = Rng(3)
        w_g = gaussian(rng, 6, 10)
        w_a = w_g.copy()
        cfg = ProjectionConfig(rank=6, method="identity", alpha=1.0, update_freq=7)
        st_g = init_adam_state((6, 10))
        st_a = init_adam_state((6, 10))
        ps = None
        h = hyper(lr=0.02)
        for step in range(100):
            g = gaussian(rng, 6, 10)
            w_g, ps, st_g = galore_step(w_g, g, ps, st_g, h, cfg, step)
            w_a, st_a = adam_step(w_a, g, st_a, h)
            assert np.array_equal(w_g, w_a)

    def test_alpha_zero_freezes_weights_moments_advance(self):
        w = gaussian(Rng(4), 4, 8)
        cfg = ProjectionConfig(rank=2, method="spectral", alpha=0.0, update_freq=5)
        st = init_adam_state(lowrank_moment_shape(4, 8, 2))
        w2, ps, st2 = galore_step(w, gaussian(Rng(5), 4, 8), None, st, hyper(), cfg, 0)
        assert np.array_equal(w2, w)
        assert st2.t == 1
        assert np.linalg.norm(st2.m) > 0

    def test_refresh_schedule(self):
        # with T=2 the step-1 projector is reused; with T=1 it is rebuilt
        rng = Rng(6)
        g0 = gaussian(rng, 5, 9)
        g1 = gaussian(rng, 5, 9)
        h = hyper()
        for freq, expect_same in ((2, True), (1, False)):
            cfg = ProjectionConfig(rank=2, method="spectral", alpha=0.25, update_freq=freq)
            st = init_adam_state(lowrank_moment_shape(5, 9, 2))
            w = np.zeros((5, 9))
            w, ps0, st = galore_step(w, g0, None, st, h, cfg, 0)
            w, ps1, st = galore_step(w, g1, ps0, st, h, cfg, 1)
            same = np.array_equal(ps0.dense(), ps1.dense())
            assert same == expect_same

    def test_projector_bytes_stable_between_refreshes(self):
        rng = Rng(8)
        cfg = ProjectionConfig(rank=3, method="spectral", alpha=0.25, update_freq=5)
        st = init_adam_state(lowrank_moment_shape(6, 12, 3))
        w = gaussian(rng, 6, 12)
        ps = None
        snapshots = []
        for step in range(10):
            w, ps, st = galore_step(w, gaussian(rng, 6, 12), ps, st, hyper(), cfg, step)
            snapshots.append(ps.dense().tobytes())
        for step in range(1, 10):
            if step % 5 == 0:
                assert snapshots[step] != snapshots[step - 1]
            else:
                assert snapshots[step] == snapshots[step - 1]

    def test_step_alignment_enforced(self):
        cfg = ProjectionConfig(rank=2, method="spectral", alpha=0.25)
        st = init_adam_state(lowrank_moment_shape(4, 6, 2))
        with pytest.raises(ParameterError):
            galore_step(np.zeros((4, 6)), np.ones((4, 6)), None, st, hyper(), cfg, step=3)

    def test_moment_count_is_low_rank(self):
        # r x max(m, n) elements, never m x n
        for (m, n) in ((8, 20), (20, 8)):
            r = 3
            st = init_adam_state(lowrank_moment_shape(m, n, r))
            assert st.m.size == r * max(m, n)
            assert st.m.size < m * n

    def test_reset_moments_on_refresh(self):
        rng = Rng(9)
        cfg = ProjectionConfig(
            rank=2, method="spectral", alpha=0.25, update_freq=3, reset_moments_on_refresh=True
        )
        st = init_adam_state(lowrank_moment_shape(5, 7, 2))
        w = gaussian(rng, 5, 7)
        ps = None
        for step in range(3):
            w, ps, st = galore_step(w, gaussian(rng, 5, 7), ps, st, hyper(), cfg, step)
        # step 3 refreshes and resets: new moments reflect only one update
        g3 = gaussian(rng, 5, 7)
        w, ps, st3 = galore_step(w, g3, ps, st, hyper(), cfg, 3)
        from galore_lite.projector import project
        expected_m = 0.1 * project(ps, g3)
        assert np.allclose(st3.m, expected_m)
        assert st3.t == 4


class TestMomentQuantization:
    def test_zero_block_exact(self):
        q = quantize_moment(np.zeros((4, 4)), block_size=8)
        assert np.array_equal(dequantize_moment(q), np.zeros((4, 4)))

    def test_skewed_block_bound(self):
        x = np.array([100.0, 1.0])
        q = quantize_moment(x.reshape(1, 2), block_size=2)
        back = dequantize_moment(q)
        assert abs(back[0, 1] - 1.0) <= 100.0 / 127

    def test_gaussian_vector_exhaustive_bound(self):
        x = Rng(10).normals(4096)
        q = quantize_moment(x.reshape(1, -1), block_size=256)
        back = dequantize_moment(q).reshape(-1)
        for b in range(16):
            lo, hi = b * 256, (b + 1) * 256
            bound = np.abs(x[lo:hi]).max() / 127
            assert np.max(np.abs(back[lo:hi] - x[lo:hi])) <= bound + 1e-15

    def test_partial_last_block(self):
        x = Rng(11).normals(100)
        q = quantize_moment(x.reshape(10, 10), block_size=64)
        assert q.block_scales.size == 2
        back = dequantize_moment(q)
        assert back.shape == (10, 10)
        assert np.max(np.abs(back - x.reshape(10, 10))) <= np.abs(x).max() / 127 + 1e-15

    def test_unsigned_nonnegative(self):
        v = np.abs(Rng(12).normals(512)).reshape(8, 64)
        q = quantize_moment(v, block_size=100, signed=False)
        back = dequantize_moment(q)
        assert (back >= 0).all()
        for b in range(q.block_scales.size):
            lo, hi = b * 100, min((b + 1) * 100, 512)
            flat = v.reshape(-1)
            bound = np.abs(flat[lo:hi]).max() / 255
            assert np.max(np.abs(back.reshape(-1)[lo:hi] - flat[lo:hi])) <= bound + 1e-15

    def test_quantized_state_v_nonnegative_over_steps(self):
        rng = Rng(13)
        st = init_adam_state((4, 16), storage="quant8", block_size=32)
        for _ in range(100):
            _, st = adam_lowrank_update(st, gaussian(rng, 4, 16), hyper())
            assert (dequantize_moment(st.v) >= 0).all()

    def test_block_size_validation(self):
        with pytest.raises(ParameterError):
            quantize_moment(np.ones((2, 2)), block_size=0)


class TestHyperValidation:
    def test_bad_hyper(self):
        with pytest.raises(ParameterError):
            AdamHyper(lr=-0.1)
        with pytest.raises(ParameterError):
            AdamHyper(lr=0.1, beta1=1.0)
        with pytest.raises(ParameterError):
            AdamHyper(lr=0.1, eps=0.0)

    def test_zero_lr_allowed(self):
        h = AdamHyper(lr=0.0)
        w = np.ones((2, 2))
        w2, st = adam_step(w, np.ones((2, 2)), init_adam_state((2, 2)), h)
        assert np.array_equal(w2, w)
        assert st.t == 1
