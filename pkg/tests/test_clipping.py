import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fake_quant_scalar
from w4a8.clipping import ClipGrid, channel_quant_mse, optimize_clipping
from w4a8.quantizer import quantize_weights
from w4a8.tensor import QuantScheme


def mse_scalar(w, bits, gamma=1.0, beta=1.0):
    codes, s = fake_quant_scalar(w, bits, gamma, beta)
    return sum((float(np.float32(v)) - float(np.float32(q * s))) ** 2 for v, q in zip(w, codes)) / len(w)


class TestGrid:
    def test_default_grid(self):
        v = ClipGrid().values()
        assert v.size == 51
        assert v[0] == np.float32(0.5) and v[-1] == np.float32(1.0)

    def test_coarse_grid(self):
        assert ClipGrid(0.5, 0.25).values().tolist() == [0.5, 0.75, 1.0]

    def test_always_contains_one(self):
        assert ClipGrid(0.5, 0.3).values().tolist()[-1] == 1.0

    def test_identity_only(self):
        assert ClipGrid(1.0, 0.1).values().tolist() == [1.0]

    @pytest.mark.parametrize("minimum,step", [(0.0, 0.1), (1.5, 0.1), (0.5, 0.0)])
    def test_invalid(self, minimum, step):
        with pytest.raises(ValueError):
            ClipGrid(minimum, step)


class TestChannelMSE:
    def test_example(self):
        s = 0.4 / 7
        want = ((0.4 - 7 * s) ** 2 + (-0.2 + 4 * s) ** 2 + (0.1 - 2 * s) ** 2) / 3
        assert channel_quant_mse([0.4, -0.2, 0.1], 4) == pytest.approx(want, rel=1e-5)
        assert channel_quant_mse([0.4, -0.2, 0.1], 4) == pytest.approx(mse_scalar([0.4, -0.2, 0.1], 4), rel=1e-12)

    def test_representable_is_zero(self):
        s = 0.25
        assert channel_quant_mse([7 * s, -3 * s, 0.0, 1 * s], 4) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            channel_quant_mse([], 4)

    @given(st.lists(st.floats(-10, 10, width=32), min_size=1, max_size=32), st.sampled_from([4, 8]),
           st.floats(0.5, 1.0), st.floats(0.5, 1.0))
    def test_matches_scalar(self, w, bits, gamma, beta):
        got = channel_quant_mse(w, bits, gamma, beta)
        assert got == pytest.approx(mse_scalar(w, bits, gamma, beta), rel=1e-9, abs=1e-30)

    @pytest.mark.parametrize("k", [0.25, 2.0, 8.0])
    def test_homogeneity(self, rng, k):
        # power-of-two factors scale every float32 step exactly
        w = rng.standard_normal(32).astype(np.float32)
        assert channel_quant_mse(w * np.float32(k), 4) == pytest.approx(k * k * channel_quant_mse(w, 4), rel=1e-12)


class TestOptimize:
    def test_on_grid_channel(self):
        s = np.float32(0.1)
        w = np.array([[7, -5, 2, 0, -7]], dtype=np.float32) * s
        res = optimize_clipping(w, 4)
        assert res.gamma[0] == 1.0 and res.beta[0] == 1.0
        assert res.mse_after[0] == 0.0

    def test_outlier_narrowed(self, rng):
        mass = rng.uniform(-0.2, 0.2, 63).astype(np.float32)
        w = np.concatenate([[np.float32(-0.4), np.float32(0.2)], mass])[None, :]
        res = optimize_clipping(w, 4)
        assert res.beta[0] < 1.0
        assert abs(res.beta[0] * -0.4) < 0.4
        assert res.mse_after[0] < res.mse_before[0]

    def test_mse_before_is_rtn(self, rng):
        w = rng.standard_normal((6, 16)).astype(np.float32)
        res = optimize_clipping(w, 4)
        for r in range(6):
            assert res.mse_before[r] == channel_quant_mse(w[r], 4)
            assert res.mse_after[r] == pytest.approx(channel_quant_mse(w[r], 4, res.gamma[r], res.beta[r]), rel=1e-12)

    def test_brute_force_oracle(self, rng):
        # independent search over the coarse grid with the scalar MSE
        grid = ClipGrid(0.5, 0.1)
        cands = [float(v) for v in grid.values()]
        w = rng.standard_normal((4, 12)).astype(np.float32)
        res = optimize_clipping(w, 4, grid)
        for r in range(4):
            scored = [(mse_scalar(w[r].tolist(), 4, g, b), -(g + b), -g, g, b) for g in cands for b in cands]
            best = min(scored)
            assert res.mse_after[r] == pytest.approx(best[0], rel=1e-9)
            chosen = mse_scalar(w[r].tolist(), 4, float(res.gamma[r]), float(res.beta[r]))
            assert chosen == pytest.approx(best[0], rel=1e-9)

    def test_tie_break_prefers_less_clipping(self):
        # zero channel: every candidate ties at MSE 0, so gamma = beta = 1
        res = optimize_clipping(np.zeros((1, 4)), 4)
        assert (res.gamma[0], res.beta[0]) == (1.0, 1.0)

    def test_identity_grid_is_rtn(self, rng):
        w = rng.standard_normal((5, 16)).astype(np.float32)
        res = optimize_clipping(w, 4, ClipGrid(1.0, 0.1))
        assert np.all(res.gamma == 1.0) and np.all(res.beta == 1.0)
        assert np.array_equal(res.mse_after, res.mse_before)
        clipped = quantize_weights(w, QuantScheme(4, clip_gamma=tuple(res.gamma), clip_beta=tuple(res.beta)))
        plain = quantize_weights(w, QuantScheme(4))
        assert np.array_equal(clipped.codes, plain.codes) and np.array_equal(clipped.scales, plain.scales)

    def test_permutation_invariant(self, rng):
        w = rng.standard_normal((7, 16)).astype(np.float32)
        perm = rng.permutation(7)
        a = optimize_clipping(w, 4)
        b = optimize_clipping(w[perm], 4)
        assert np.array_equal(a.gamma[perm], b.gamma)
        assert np.array_equal(a.beta[perm], b.beta)
        assert np.array_equal(a.mse_after[perm], b.mse_after)

    @pytest.mark.parametrize("k", [0.5, 4.0])
    def test_scale_homogeneity(self, rng, k):
        w = rng.standard_normal((4, 24)).astype(np.float32)
        a = optimize_clipping(w, 4)
        b = optimize_clipping(w * np.float32(k), 4)
        assert np.array_equal(a.gamma, b.gamma) and np.array_equal(a.beta, b.beta)
        assert np.allclose(b.mse_after, k * k * a.mse_after, rtol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            optimize_clipping(np.zeros((0, 4)), 4)
        with pytest.raises(ValueError):
            optimize_clipping(np.ones((1, 4)), 3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 40), st.sampled_from([4, 8]), st.integers(0, 2**32 - 1))
    def test_never_worse(self, rows, cols, bits, seed):
        w = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
        res = optimize_clipping(w, bits, ClipGrid(0.5, 0.05))
        assert np.all(res.mse_after <= res.mse_before)
        assert np.all((res.gamma > 0) & (res.gamma <= 1)) and np.all((res.beta > 0) & (res.beta <= 1))
