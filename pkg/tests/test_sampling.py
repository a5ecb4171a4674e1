import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsedeq.sampling import (AngleMask, MaskDistribution, WeightDiagonal, complementary_split,
                                compute_weight_diagonal, equispaced_fixed, expected_mask_gram, sample_mask,
                                sample_pair, split_complementary, uniform_subset, weighted_residual_norm_sq)


def test_mask_invariants_enforced():
    with pytest.raises(ValueError):
        AngleMask((), 4)
    with pytest.raises(ValueError):
        AngleMask((2, 1), 4)
    with pytest.raises(ValueError):
        AngleMask((1, 1), 4)
    with pytest.raises(ValueError):
        AngleMask((0, 4), 4)


def test_mask_string_round_trip():
    m = AngleMask((0, 3, 17), 20)
    assert m.to_string() == "0,3,17"
    assert AngleMask.from_string(m.to_string(), 20) == m


@pytest.mark.parametrize("kw", [dict(kind="uniform", s=0, n_angles_total=4),
                                dict(kind="uniform", s=5, n_angles_total=4),
                                dict(kind="complementary", s=3, n_angles_total=6),
                                dict(kind="random", s=2, n_angles_total=6)])
def test_distribution_invariants(kw):
    with pytest.raises(ValueError):
        MaskDistribution(**kw)


def test_equispaced_fixed():
    m = sample_mask(equispaced_fixed(4, 8), np.random.default_rng(0))
    assert m.indices == (0, 2, 4, 6)


def test_uniform_full_set():
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert sample_mask(uniform_subset(7, 7), rng).indices == tuple(range(7))


def test_uniform_subset_frequencies():
    rng = np.random.default_rng(11)
    dist = uniform_subset(2, 4)
    counts = Counter(sample_mask(dist, rng).indices for _ in range(100_000))
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / 100_000 - 1 / 6) < 0.01


def test_sampling_reproducible_from_seed():
    dist = uniform_subset(5, 30)
    a = [sample_mask(dist, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_mask(dist, np.random.default_rng(9)) for _ in range(3)]
    assert a == b


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_sampled_masks_satisfy_invariants(seed, s):
    m = sample_mask(uniform_subset(s, 12), np.random.default_rng(seed))
    assert len(m) == s and list(m.indices) == sorted(set(m.indices))


def test_split_complementary_two_angles():
    a, b = split_complementary(complementary_split(2, 2), np.random.default_rng(0))
    assert {a.indices, b.indices} == {(0,), (1,)}


def test_split_complementary_disjoint():
    rng = np.random.default_rng(5)
    dist = complementary_split(6, 10)
    for _ in range(10_000):
        a, b = split_complementary(dist, rng)
        assert not set(a.indices) & set(b.indices)
        assert len(set(a.indices) | set(b.indices)) == 6


def test_split_complementary_marginal_uniform():
    rng = np.random.default_rng(2)
    dist = complementary_split(4, 6)
    counts = Counter(split_complementary(dist, rng)[0].indices for _ in range(100_000))
    assert set(counts) == set(itertools.combinations(range(6), 2))
    for c in counts.values():
        assert abs(c / 100_000 - 1 / 15) < 0.01


def test_split_rejects_odd_total():
    with pytest.raises(ValueError):
        split_complementary(MaskDistribution("uniform", 3, 6), np.random.default_rng(0))


def test_iid_pair_masks_independent():
    rng = np.random.default_rng(8)
    n, s, draws = 6, 2, 10_000
    dist = uniform_subset(s, n)
    co = 0
    for _ in range(draws):
        a, b = sample_pair(dist, rng, "iid")
        co += (0 in a.indices) and (0 in b.indices)
    p = (s / n) ** 2
    assert abs(co / draws - p) < 3 * math.sqrt(p * (1 - p) / draws)


def test_complementary_pair_sizes():
    a, b = sample_pair(uniform_subset(3, 12), np.random.default_rng(0), "complementary")
    assert len(a) == len(b) == 3 and not set(a.indices) & set(b.indices)


def test_weight_diagonal_uniform():
    w = compute_weight_diagonal(uniform_subset(16, 384), n_detectors=3)
    np.testing.assert_allclose(w.values, math.sqrt(24))
    assert w.values[0] == pytest.approx(4.89898, abs=1e-5)
    assert w.values.shape == (384 * 3,)


def test_weight_diagonal_full_sampling():
    np.testing.assert_array_equal(compute_weight_diagonal(uniform_subset(9, 9)).values, 1.0)


def test_weight_diagonal_equispaced():
    w = compute_weight_diagonal(equispaced_fixed(2, 4), n_detectors=2)
    np.testing.assert_array_equal(w.per_angle, [1, 0, 1, 0])
    np.testing.assert_array_equal(w.values, [1, 1, 0, 0, 1, 1, 0, 0])


@pytest.mark.parametrize("dist", [uniform_subset(3, 7), equispaced_fixed(3, 7), complementary_split(4, 8)])
def test_weights_invert_gram(dist):
    gram = expected_mask_gram(dist, "exact")
    w = compute_weight_diagonal(dist).per_angle
    nz = gram > 0
    np.testing.assert_allclose(w[nz] ** 2 * gram[nz], 1.0, rtol=1e-14)
    assert not w[~nz].any()


def test_expected_gram_paper_value():
    # uniform subset: every angle is kept with probability s / n
    gram = expected_mask_gram(uniform_subset(16, 384), "monte-carlo", n_draws=20_000, seed=1)
    assert abs(gram.mean() - 1 / 24) < 1e-12
    np.testing.assert_allclose(compute_weight_diagonal(uniform_subset(16, 384)).per_angle ** -2, 1 / 24)


def test_expected_gram_enumeration():
    np.testing.assert_allclose(expected_mask_gram(uniform_subset(2, 6), "exact"), 1 / 3, rtol=0, atol=1e-15)


def test_expected_gram_budget():
    with pytest.raises(ValueError, match="monte-carlo"):
        expected_mask_gram(uniform_subset(16, 384), "exact")


def test_expected_gram_monte_carlo_within_binomial_band():
    n_draws = 10**6
    got = expected_mask_gram(uniform_subset(2, 6), "monte-carlo", n_draws=n_draws, seed=3)
    p = 1 / 3
    assert np.all(np.abs(got - p) < 3 * math.sqrt(p * (1 - p) / n_draws))


def test_expected_isometry_by_enumeration():
    # E[M'^T W M'] = I: weights times selection probability is one on every angle
    for n in range(2, 9):
        for s in range(1, n + 1):
            dist = uniform_subset(s, n)
            w = compute_weight_diagonal(dist).per_angle
            acc = np.zeros(n)
            subsets = list(itertools.combinations(range(n), s))
            for sub in subsets:
                acc[list(sub)] += w[list(sub)] ** 2
            np.testing.assert_allclose(acc / len(subsets), 1.0, rtol=1e-14)


def test_weighted_norm_trivial_cases(rng):
    m = AngleMask((0, 2), 4)
    assert weighted_residual_norm_sq(np.zeros((2, 3)), m, compute_weight_diagonal(uniform_subset(2, 4))) == 0
    z = rng.standard_normal((2, 3))
    assert weighted_residual_norm_sq(z, m, WeightDiagonal(np.ones(4))) == pytest.approx(np.sum(z * z), rel=1e-15)


def test_weighted_norm_dense_oracle(rng):
    m = AngleMask((0, 1, 3), 4)
    w = WeightDiagonal(rng.random(4) + 0.5, 3)
    z = rng.standard_normal((3, 3))
    rows = (m.array[:, None] * 3 + np.arange(3)).ravel()
    dense_w = np.diag(w.values[rows] ** 2)
    assert weighted_residual_norm_sq(z, m, w) == pytest.approx(z.ravel() @ dense_w @ z.ravel(), rel=1e-12)


def test_weighted_norm_length_mismatch():
    with pytest.raises(ValueError):
        weighted_residual_norm_sq(np.zeros((3, 2)), AngleMask((0, 1), 4), WeightDiagonal(np.ones(4)))
