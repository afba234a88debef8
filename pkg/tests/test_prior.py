from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hjriccati import (
    CovarianceRetune,
    DataBlock,
    GaussianPrior,
    RiccatiState,
    closed_form_posterior,
    closed_form_state,
    incorporate,
    init_state,
    matrix_inv_sqrt,
    posterior,
    retarget_prior_mean,
    scale_prior_covariance,
    tune_prior_covariance,
)
from hjriccati.errors import DimensionMismatch, NonSPD

from conftest import random_instance, random_spd


def rel(a, b):
    return float(np.max(np.abs(np.asarray(a) - b)) / np.max(np.abs(b)))


def scalar_trained():
    return incorporate(init_state(GaussianPrior(np.eye(1))), DataBlock([[1.0]], [2.0], 1.0), 1e-4)


def trained(prior, blocks):
    return closed_form_state(prior, blocks)


# --- retarget_prior_mean ------------------------------------------------------------


def test_retarget_same_x():
    s = scalar_trained()
    a, b = retarget_prior_mean(s, [0.0]), posterior(s, [0.0])
    np.testing.assert_array_equal(a.mu, b.mu)


def test_retarget_scalar_example():
    s = RiccatiState([[0.5]], [1.0])
    mu, sigma = retarget_prior_mean(s, [2.0])
    assert mu[0] == 2.0 and sigma[0, 0] == 0.5


def test_retarget_never_touches_sigma(rng):
    s = RiccatiState(random_spd(rng, 4), rng.standard_normal(4), 0.0, 1.7)
    a = retarget_prior_mean(s, rng.standard_normal(4))
    b = retarget_prior_mean(s, rng.standard_normal(4))
    assert np.array_equal(a.sigma, b.sigma)


# --- matrix_inv_sqrt -------------------------------------------------------------------


def test_inv_sqrt_identity():
    np.testing.assert_allclose(matrix_inv_sqrt(np.eye(3)), np.eye(3), atol=1e-15)


def test_inv_sqrt_diagonal():
    np.testing.assert_allclose(matrix_inv_sqrt(np.diag([4.0, 9.0])), np.diag([0.5, 1 / 3]), atol=1e-15)


@given(st.integers(1, 8), st.integers(0, 10_000))
def test_inv_sqrt_identity_property(n, seed):
    a = random_spd(np.random.default_rng(seed), n, cond=100.0)
    r = matrix_inv_sqrt(a)
    assert np.linalg.norm(r @ r @ a - np.eye(n)) < 1e-10
    assert np.array_equal(r, r.T)


def test_inv_sqrt_rejects_singular():
    with pytest.raises(NonSPD):
        matrix_inv_sqrt(np.diag([1.0, 0.0]))


# --- CovarianceRetune ------------------------------------------------------------------------


def test_retune_validates_shapes_and_spd():
    with pytest.raises(DimensionMismatch):
        CovarianceRetune(np.eye(2), np.eye(3))
    with pytest.raises(NonSPD):
        CovarianceRetune(np.eye(2), -np.eye(2))
    with pytest.raises(ValueError):
        CovarianceRetune(np.eye(2), 3 * np.eye(2), scale_alpha=2.0)


# --- tune_prior_covariance ------------------------------------------------------------------------


def test_tune_prior_identity_swap(rng):
    prior, blocks = random_instance(rng, 3, 4)
    s = trained(prior, blocks)
    out = tune_prior_covariance(s, CovarianceRetune(prior.lam, prior.lam), h=1e-3)
    assert np.abs(out.P - s.P).max() < 1e-8
    assert np.abs(out.q - s.q).max() < 1e-8


def test_tune_prior_scalar_example():
    out = tune_prior_covariance(scalar_trained(), CovarianceRetune(np.eye(1), 4 * np.eye(1)), h=1e-4)
    mu, sigma = posterior(out)
    assert mu[0] == pytest.approx(1.6, abs=1e-8)
    assert sigma[0, 0] == pytest.approx(0.8, abs=1e-8)


def test_tune_prior_random_n5(rng):
    prior, blocks = random_instance(rng, 5, 6)
    new = random_spd(rng, 5)
    out = tune_prior_covariance(trained(prior, blocks), CovarianceRetune(prior.lam, new), x=prior.x, h=1e-3)
    ref = closed_form_posterior(GaussianPrior(new, prior.x, prior.epsilon), blocks)
    got = posterior(out, prior.x)
    assert rel(got.mu, ref.mu) < 1e-6 and rel(got.sigma, ref.sigma) < 1e-6


def test_tune_prior_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        tune_prior_covariance(scalar_trained(), CovarianceRetune(np.eye(2), np.eye(2)))


# --- scale_prior_covariance --------------------------------------------------------------------------


def test_scale_alpha_one_is_identity():
    s = scalar_trained()
    out = scale_prior_covariance(s, np.eye(1), 1.0, 1e-3)
    assert out is s


def test_scale_scalar_example_and_two_phase_agreement():
    s = scalar_trained()
    one = scale_prior_covariance(s, np.eye(1), 4.0, 1e-4)
    two = tune_prior_covariance(s, CovarianceRetune.scaled(np.eye(1), 4.0), h=1e-4)
    assert posterior(one).mu[0] == pytest.approx(1.6, abs=1e-8)
    assert posterior(one).sigma[0, 0] == pytest.approx(0.8, abs=1e-8)
    assert abs(one.P[0, 0] - two.P[0, 0]) < 1e-8 and abs(one.q[0] - two.q[0]) < 1e-8


def test_scale_midpoint_sample():
    # s = 5/8 is the implied alpha 1.6
    prior = GaussianPrior(np.eye(1))
    blk = DataBlock([[1.0]], [2.0], 1.0)
    _, trace = scale_prior_covariance(scalar_trained(), np.eye(1), 4.0, 1.0 / 8.0 / 100, emit=True)
    smp = min(trace, key=lambda t: abs(t.param - 1.6))
    assert smp.param == pytest.approx(1.6, rel=1e-9)
    ref = closed_form_posterior(GaussianPrior(1.6 * prior.lam), [blk])
    assert rel(smp.mu, ref.mu) < 1e-6 and rel(smp.sigma, ref.sigma) < 1e-6


def test_scale_rejects_bad_alpha():
    with pytest.raises(ValueError):
        scale_prior_covariance(scalar_trained(), np.eye(1), 0.0, 1e-3)


@given(st.integers(1, 6), st.integers(1, 8), st.floats(0.3, 3.0), st.integers(0, 10_000))
def test_prior_paths_match_oracle(n, n_blocks, alpha, seed):
    prior, blocks = random_instance(np.random.default_rng(seed), n, n_blocks)
    s = trained(prior, blocks)
    one = scale_prior_covariance(s, prior.lam, alpha, 1e-3, x=prior.x)
    two = tune_prior_covariance(s, CovarianceRetune.scaled(prior.lam, alpha), x=prior.x, h=1e-3)
    ref = closed_form_posterior(GaussianPrior(alpha * prior.lam, prior.x, prior.epsilon), blocks)
    for out in (one, two):
        got = posterior(out, prior.x)
        assert rel(got.mu, ref.mu) < 1e-6 and rel(got.sigma, ref.sigma) < 1e-6
    assert rel(one.P, two.P) < 1e-7 and rel(one.q, two.q) < 1e-7


def test_scale_flow_continuity(rng):
    prior, blocks = random_instance(rng, 4, 5)
    s = trained(prior, blocks)
    jumps = {}
    for h in (1e-2, 5e-3):
        _, trace = scale_prior_covariance(s, prior.lam, 3.0, h, emit=True)
        jumps[h] = max(np.abs(b.mu - a.mu).max() for a, b in zip(trace, trace[1:]))
    # O(h): halving h halves the largest jump between samples
    assert jumps[5e-3] / jumps[1e-2] == pytest.approx(0.5, rel=0.05)
