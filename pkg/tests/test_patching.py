"""Patch grids, prediction pairs, and loss-window subsampling."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infostack.patching import (PredictionPairSet, build_prediction_pairs_grid,
                                build_prediction_pairs_seq, extract_patch_grid,
                                reconstruct_from_grid, subsample_loss_window)
from infostack.rng import SeededRng
from infostack.tensor import Tensor, backward, tsum, mul


class TestExtractPatchGrid:
    def test_canonical_7x7(self):
        img = np.random.default_rng(0).normal(size=(1, 64, 64))
        grid = extract_patch_grid(img, 16, 8)
        assert (grid.rows, grid.cols) == (7, 7)
        assert grid.patches.shape == (7, 7, 1, 16, 16)
        assert grid.stride_px == 8

    def test_single_patch(self):
        img = np.zeros((3, 16, 16))
        grid = extract_patch_grid(img, 16, 8)
        assert (grid.rows, grid.cols) == (1, 1)

    def test_11x11_for_96px(self):
        img = np.zeros((1, 96, 96))
        grid = extract_patch_grid(img, 16, 8)
        assert (grid.rows, grid.cols) == (11, 11)

    def test_divisibility_error_names_valid_sizes(self):
        with pytest.raises(ValueError, match="valid sizes"):
            extract_patch_grid(np.zeros((1, 63, 64)), 16, 8)

    def test_patches_are_exact_windows(self):
        img = np.arange(1 * 32 * 32, dtype=np.float64).reshape(1, 32, 32)
        grid = extract_patch_grid(img, 16, 8)
        assert np.array_equal(grid.patches[1, 2], img[:, 8:24, 16:32])

    def test_reconstruction_reproduces_image(self):
        img = np.random.default_rng(1).normal(size=(2, 40, 24))
        grid = extract_patch_grid(img, 8, 4)
        assert np.array_equal(reconstruct_from_grid(grid), img)


class TestGridPairs:
    def test_counts_for_7x7_k4_skip1(self):
        ps = build_prediction_pairs_grid((7, 7), K=4, skip=1)
        assert ps.delays == [2, 3, 4, 5]
        assert len(ps) == 7 * (5 + 4 + 3 + 2)

    def test_minimal_pair(self):
        ps = build_prediction_pairs_grid((3, 1), K=1, skip=1)
        assert ps.pairs == [(0, 2, 2)]

    def test_too_short_grid_errors(self):
        with pytest.raises(ValueError):
            build_prediction_pairs_grid((2, 5), K=1, skip=1)

    @settings(max_examples=50, deadline=None)
    @given(rows=st.integers(3, 10), cols=st.integers(1, 8),
           K=st.integers(1, 5), skip=st.integers(0, 2))
    def test_soundness_property(self, rows, cols, K, skip):
        if rows < skip + 2:
            with pytest.raises(ValueError):
                build_prediction_pairs_grid((rows, cols), K, skip)
            return
        try:
            ps = build_prediction_pairs_grid((rows, cols), K, skip)
        except ValueError:
            assert rows <= 1 + skip + 1  # no target row reachable
            return
        for a, t, k in ps.pairs:
            ai, aj = divmod(a, cols)
            ti, tj = divmod(t, cols)
            assert aj == tj              # same column only
            assert ti - ai == k and k >= 1 + skip and k <= K + skip
            assert 0 <= ai < rows and 0 <= ti < rows


class TestSeqPairs:
    def test_enumeration_t3_k2(self):
        ps = build_prediction_pairs_seq(3, 2)
        assert sorted(ps.pairs) == [(0, 1, 1), (0, 2, 2), (1, 2, 1)]

    def test_minimal(self):
        assert build_prediction_pairs_seq(2, 1).pairs == [(0, 1, 1)]

    def test_count_formula_t64_k12(self):
        ps = build_prediction_pairs_seq(64, 12)
        assert len(ps) == 12 * 64 - sum(range(1, 13))

    def test_t_not_larger_than_k_errors(self):
        with pytest.raises(ValueError):
            build_prediction_pairs_seq(12, 12)

    @settings(max_examples=50, deadline=None)
    @given(T=st.integers(2, 64), K=st.integers(1, 12))
    def test_soundness_property(self, T, K):
        if T <= K:
            with pytest.raises(ValueError):
                build_prediction_pairs_seq(T, K)
            return
        ps = build_prediction_pairs_seq(T, K)
        assert len(ps) == sum(T - k for k in range(1, K + 1))
        for a, t, k in ps.pairs:
            assert t == a + k and 0 <= a < t < T

    def test_by_delay_grouping(self):
        ps = build_prediction_pairs_seq(5, 2)
        by = ps.by_delay()
        assert set(by) == {1, 2}
        a1, t1 = by[1]
        assert np.array_equal(a1, [0, 1, 2, 3]) and np.array_equal(t1, [1, 2, 3, 4])


class TestLossWindow:
    def test_identity_when_window_equals_length(self):
        z = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
        out = subsample_loss_window(z, 6, SeededRng(0))
        assert np.array_equal(out.data, z.data)

    def test_deterministic_per_seed(self):
        z = Tensor(np.random.default_rng(1).normal(size=(10, 4)))
        a = subsample_loss_window(z, 4, SeededRng(3).child("w"))
        b = subsample_loss_window(z, 4, SeededRng(3).child("w"))
        assert np.array_equal(a.data, b.data)

    def test_window_larger_than_length_errors(self):
        with pytest.raises(ValueError):
            subsample_loss_window(Tensor(np.zeros((3, 2))), 4, SeededRng(0))

    def test_gradient_flows_through_slice(self):
        z = Tensor(np.random.default_rng(2).normal(size=(8, 3)), requires_grad=True)
        out = subsample_loss_window(z, 4, SeededRng(1))
        backward(tsum(mul(out, out)), params=[z])
        nonzero_rows = np.any(z.grad != 0, axis=1)
        assert nonzero_rows.sum() == 4  # exactly the window rows

    def test_offsets_uniform_chi_squared(self):
        # offsets over many draws should be uniform on [0, T - window]
        T, window, draws = 10, 4, 10_000
        rng = SeededRng(123).child("offsets")
        z = Tensor(np.arange(T * 2, dtype=np.float64).reshape(T, 2))
        counts = np.zeros(T - window + 1)
        for _ in range(draws):
            out = subsample_loss_window(z, window, rng)
            counts[int(out.data[0, 0] // 2)] += 1
        expected = draws / len(counts)
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # dof = 6; p > 0.01 means chi2 below the 0.99 quantile (16.81)
        assert chi2 < 16.81


def test_pair_set_len_and_delays():
    ps = build_prediction_pairs_seq(6, 3)
    assert isinstance(ps, PredictionPairSet)
    assert ps.delays == [1, 2, 3]
    assert len(ps) == 5 + 4 + 3
