import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspe.particle_core import (ParticleCollapse, Streams, ess, log_mean_exp, logsumexp, normalize_log_weights,
                                replicate_key, resample, sample_categorical)


def test_normalize_symmetric():
    w, lm = normalize_log_weights([0.0, 0.0])
    assert w.tolist() == [0.5, 0.5] and lm == 0.0


def test_normalize_shift_invariant():
    c = 1e6
    w, _ = normalize_log_weights([c, c + math.log(3)])
    assert np.allclose(w, [0.25, 0.75], atol=1e-12)


def test_normalize_hand_values():
    w, lm = normalize_log_weights(np.log([1.0, 2.0, 5.0]))
    assert np.allclose(w, [0.125, 0.25, 0.625], atol=1e-15)
    assert lm == pytest.approx(math.log(8 / 3))


def test_normalize_collapse_names_step():
    with pytest.raises(ParticleCollapse, match="7"):
        normalize_log_weights([-np.inf, -np.inf], time_index=7)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=50))
def test_normalize_properties(logw):
    w, lm = normalize_log_weights(logw)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    a = np.asarray(logw)
    assert lm == pytest.approx(np.log(np.mean(np.exp(a - a.max()))) + a.max(), abs=1e-9)


def test_logsumexp_matches_naive(rng):
    a = rng.normal(size=(4, 6))
    assert np.allclose(logsumexp(a, axis=1), np.log(np.exp(a).sum(axis=1)))
    assert logsumexp(a) == pytest.approx(np.log(np.exp(a).sum()))
    assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf
    assert log_mean_exp([0.0, 0.0, 0.0]) == pytest.approx(0.0)


def test_ess_examples():
    assert ess(np.full(100, 0.01)) == pytest.approx(100)
    assert ess([1.0, 0.0, 0.0]) == 1.0
    assert ess([0.5, 0.25, 0.25]) == pytest.approx(8 / 3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_ess_bounds_and_permutation(raw, rnd):
    w = np.asarray(raw) / np.sum(raw)
    e = ess(w)
    assert 1 - 1e-9 <= e <= w.size + 1e-9
    perm = list(range(w.size))
    rnd.shuffle(perm)
    assert ess(w[perm]) == pytest.approx(e, rel=1e-12)


@pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
def test_point_mass(scheme, rng):
    assert resample(np.array([1.0, 0.0, 0.0]), 5, scheme, rng).tolist() == [0] * 5


def test_systematic_uniform_is_permutation(rng):
    for _ in range(50):
        idx = resample(np.full(17, 1 / 17), 17, "systematic", rng)
        assert sorted(idx.tolist()) == list(range(17))


def test_multinomial_binomial_moment():
    g = np.random.default_rng(1)
    reps = 100_000
    counts = np.array([np.count_nonzero(resample(np.array([0.7, 0.3]), 10, "multinomial", g) == 0)
                       for _ in range(reps)])
    sd = math.sqrt(10 * 0.7 * 0.3 / reps)
    assert abs(counts.mean() - 7.0) < 3 * sd


@pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
def test_offspring_unbiased(scheme):
    g = np.random.default_rng(5)
    reps, n_out = 100_000, 8
    for _ in range(10):
        w = g.dirichlet(np.ones(6))
        counts = np.zeros((reps, w.size))
        for r in range(reps):
            counts[r] = np.bincount(resample(w, n_out, scheme, g), minlength=w.size)
        mean = counts.mean(axis=0)
        se = counts.std(axis=0) / math.sqrt(reps)
        assert np.all(np.abs(mean - n_out * w) <= 3 * se + 1e-12)


def test_systematic_counts_within_one(rng):
    for _ in range(200):
        w = rng.dirichlet(np.ones(9) * 0.5)
        c = np.bincount(resample(w, 20, "systematic", rng), minlength=9)
        assert np.all(np.abs(c - 20 * w) < 1)


def test_unknown_scheme(rng):
    with pytest.raises(ValueError):
        resample(np.array([1.0]), 1, "residual", rng)


def test_ties_go_to_lowest_index():
    class Fixed:
        def random(self, size=None):
            return np.full(size, 0.5) if size else 0.0

    # cdf = (0.5, 0.5, 1.0): u = 0.5 must skip the zero-weight index 1
    assert sample_categorical(np.array([0.5, 0.0, 0.5]), 2, Fixed()).tolist() == [2, 2]


def test_streams_reproducible_and_distinct():
    a, b = Streams(3, 1), Streams(3, 1)
    assert a.step(5).random() == b.step(5).random()
    assert a.step(5).random() != a.step(6).random()
    assert Streams(3, 2).step(5).random() != a.step(5).random()
    assert a.child(0).step(0).random() != a.child(1).step(0).random()
    assert not np.array_equal(replicate_key(0, 0), replicate_key(0, 1))
