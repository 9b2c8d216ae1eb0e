"""Scoring heads, negative sampling, and the contrastive loss identities."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infostack.contrastive import (ContrastiveBatch, PredictionHead,
                                   build_head, delay_loss, infonce_loss,
                                   mi_lower_bound, module_loss,
                                   sample_negatives, score_log_bilinear)
from infostack.rng import SeededRng
from infostack.tensor import Tensor, ShapeError, backward, finite_diff_check, tsum


def t(vals, rg=False):
    return Tensor(np.asarray(vals, dtype=np.float64), requires_grad=rg)


class TestScore:
    def test_zero_target(self):
        s = score_log_bilinear(t([0.0, 0.0]), t([1.0, 2.0]), t(np.eye(2)))
        assert float(s.data) == 0.0

    def test_unit_identity(self):
        s = score_log_bilinear(t([1.0, 0.0]), t([1.0, 0.0]), t(np.eye(2)))
        assert float(s.data) == 1.0

    def test_hand_matrix_vector(self):
        s = score_log_bilinear(t([1.0, 2.0]), t([3.0, -1.0]), t([[1.0, 0.0], [2.0, 1.0]]))
        assert float(s.data) == 13.0

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            score_log_bilinear(t([1.0, 2.0, 3.0]), t([1.0, 2.0]), t(np.eye(2)))

    def test_gradcheck(self):
        rng = np.random.default_rng(0)
        W = t(rng.normal(size=(4, 4)))
        a = t(rng.normal(size=4))
        err = finite_diff_check(lambda x: score_log_bilinear(x, a, W), t(rng.normal(size=4)))
        assert err < 1e-6


class TestSampleNegatives:
    def test_single_element_pool(self):
        pool = t([[1.0, 2.0]])
        out = sample_negatives(pool, 5, SeededRng(0))
        assert np.array_equal(out.data, np.tile([1.0, 2.0], (5, 1)))

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            sample_negatives(t(np.zeros((0, 2))), 3, SeededRng(0))

    def test_uniform_with_replacement(self):
        pool = t(np.arange(8, dtype=np.float64)[:, None])
        draws = sample_negatives(pool, 4000, SeededRng(1)).data.ravel().astype(int)
        counts = np.bincount(draws, minlength=8)
        expected = 4000 / 8
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < 18.48  # chi2_{7, 0.99}
        assert len(np.unique(draws)) == 8


def make_bag(scores, delay=1, positive_index=0):
    """A bag whose log scores under W=I and anchor e1 are exactly `scores`."""
    d = 2
    anchor = t([1.0, 0.0])
    order = list(scores)
    pos = order[positive_index]
    negs = order[:positive_index] + order[positive_index + 1:]
    return ContrastiveBatch(anchor=anchor,
                            positive=t([pos, 0.0]),
                            negatives=t([[s, 0.0] for s in negs]),
                            delay=delay, positive_index=positive_index)


def identity_head(delays=(1,), d=2):
    return PredictionHead(0, {k: t(np.eye(d), rg=True) for k in delays})


class TestInfonceLoss:
    def test_uniform_scores_give_ln_n(self):
        # 16 negatives + positive: N = 17
        bag = make_bag([0.0] * 17)
        report = infonce_loss([bag], identity_head())
        assert abs(report.total_value - math.log(17)) < 1e-12
        assert abs(report.total_value - 2.833213344056216) < 1e-9

    def test_hand_case_n2(self):
        bag = make_bag([1.0, 0.0])
        report = infonce_loss([bag], identity_head())
        assert abs(report.total_value - math.log(1 + math.exp(-1))) < 1e-9
        assert abs(report.total_value - 0.313262) < 1e-6

    def test_dominant_positive_drives_loss_to_zero(self):
        bag = make_bag([50.0, 0.0, 0.0])
        report = infonce_loss([bag], identity_head())
        assert report.total_value < 1e-12
        assert abs(report.mi_bound_per_delay[1] - math.log(3)) < 1e-9

    def test_per_delay_average_then_sum(self):
        bags = [make_bag([0.0, 0.0], delay=1), make_bag([1.0, 0.0], delay=1),
                make_bag([0.0, 0.0], delay=2)]
        head = identity_head(delays=(1, 2))
        report = infonce_loss(bags, head)
        l1 = (math.log(2) + math.log(1 + math.exp(-1))) / 2
        l2 = math.log(2)
        assert abs(report.per_delay_values[1] - l1) < 1e-12
        assert abs(report.per_delay_values[2] - l2) < 1e-12
        assert abs(report.total_value - (l1 + l2)) < 1e-12

    def test_missing_delay_rejected(self):
        with pytest.raises(KeyError):
            infonce_loss([make_bag([0.0, 0.0], delay=9)], identity_head())

    def test_empty_batch_list_rejected(self):
        with pytest.raises(ValueError):
            infonce_loss([], identity_head())

    def test_permutation_of_negatives_invariant(self):
        rng = np.random.default_rng(0)
        scores = list(rng.normal(size=6))
        a = infonce_loss([make_bag(scores)], identity_head()).total_value
        perm = [scores[0]] + list(rng.permutation(scores[1:]))
        b = infonce_loss([make_bag(perm)], identity_head()).total_value
        assert abs(a - b) < 1e-12

    def test_positive_index_position_invariant(self):
        scores = [1.3, -0.2, 0.4, 0.0]
        base = infonce_loss([make_bag(scores, positive_index=0)],
                            identity_head()).total_value
        moved = [-0.2, 0.4, 1.3, 0.0]
        other = infonce_loss([make_bag(moved, positive_index=2)],
                             identity_head()).total_value
        assert abs(base - other) < 1e-12

    def test_loss_nonnegative_and_bound_below_ln_n(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            scores = list(rng.normal(scale=3.0, size=8))
            rep = infonce_loss([make_bag(scores)], identity_head())
            assert rep.total_value >= 0.0
            for k, b in mi_lower_bound(rep).items():
                assert b <= math.log(8) + 1e-12


class TestVectorizedEquivalence:
    def test_delay_loss_matches_per_bag_path(self):
        rng = np.random.default_rng(2)
        P, d, n_neg = 12, 5, 4
        flat_data = rng.normal(size=(P, d))
        W_data = rng.normal(size=(d, d))
        a_idx = np.array([0, 1, 2, 5])
        t_idx = np.array([3, 4, 6, 9])
        neg_idx = rng.integers(0, P, size=(4, n_neg))

        flat = t(flat_data, rg=True)
        W = t(W_data, rg=True)
        vec = delay_loss(flat, a_idx, t_idx, W, n_neg, rng=None, neg_idx=neg_idx)

        head = PredictionHead(0, {1: t(W_data, rg=True)})
        bags = []
        for i in range(4):
            bags.append(ContrastiveBatch(
                anchor=t(flat_data[a_idx[i]]),
                positive=t(flat_data[t_idx[i]]),
                negatives=t(flat_data[neg_idx[i]]),
                delay=1))
        ref = infonce_loss(bags, head)
        assert abs(float(vec.data) - ref.total_value) < 1e-12

    def test_module_loss_reports_all_delays(self):
        rng = np.random.default_rng(3)
        flat = t(rng.normal(size=(20, 4)), rg=True)
        head = build_head(0, 4, 4, delays=[1, 2])
        pairs = {1: (np.arange(5), np.arange(5) + 1),
                 2: (np.arange(4), np.arange(4) + 2)}
        report = module_loss(flat, pairs, head, n_negatives=3,
                             rng=SeededRng(0).child("neg"))
        assert set(report.per_delay) == {1, 2}
        assert report.bag_size == 4
        # zero-initialized heads score uniformly: loss is exactly ln N per delay
        for k in (1, 2):
            assert abs(report.per_delay_values[k] - math.log(4)) < 1e-12

    def test_gradient_reaches_only_flat_and_w(self):
        rng = np.random.default_rng(4)
        flat = t(rng.normal(size=(10, 3)), rg=True)
        other = t(rng.normal(size=(10, 3)), rg=True)
        W = t(rng.normal(size=(3, 3)), rg=True)
        loss = delay_loss(flat, np.array([0, 1]), np.array([2, 3]), W, 3,
                          rng=SeededRng(1))
        grads = backward(loss, params=[flat, W, other])
        assert np.any(grads[flat] != 0) and np.any(grads[W] != 0)
        assert np.all(grads[other] == 0)

    def test_infonce_composite_gradcheck(self):
        rng = np.random.default_rng(5)
        W = t(rng.normal(size=(4, 4)))
        neg_idx = rng.integers(0, 8, size=(3, 5))
        err = finite_diff_check(
            lambda x: delay_loss(x, np.array([0, 1, 2]), np.array([3, 4, 5]),
                                 W, 5, rng=None, neg_idx=neg_idx),
            t(rng.normal(size=(8, 4))))
        assert err < 1e-6


@settings(max_examples=30, deadline=None)
@given(n_neg=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_uniform_scores_identity_property(n_neg, seed):
    # any bag scored by a zero matrix gives exactly ln(bag size)
    rng = np.random.default_rng(seed)
    head = PredictionHead(0, {1: Tensor(np.zeros((3, 3)), requires_grad=True)})
    bag = ContrastiveBatch(anchor=Tensor(rng.normal(size=3)),
                           positive=Tensor(rng.normal(size=3)),
                           negatives=Tensor(rng.normal(size=(n_neg, 3))),
                           delay=1)
    rep = infonce_loss([bag], head)
    assert abs(rep.total_value - math.log(n_neg + 1)) < 1e-12
