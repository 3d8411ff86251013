import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_pd, random_policy, random_samples
from pigps.controllers import (
    COV_FLOOR, LinGaussPolicy, NotPositiveDefiniteError, SampleSet, Trajectory,
    floor_covariance, gaussian_kl, policy_step_kl, safe_cholesky, sample_action,
    sample_rollouts, smoothing_matrix, trajectory_kl,
)
from pigps.envs import PointMassEnv


def one_step(K, k, C):
    return LinGaussPolicy(np.asarray(K, float)[None], np.asarray(k, float)[None],
                          np.asarray(C, float)[None])


def test_sample_action_zero_covariance_gives_mean():
    pol = one_step(np.zeros((2, 2)), [1.0, 2.0], np.zeros((2, 2)))
    np.testing.assert_array_equal(sample_action(pol, 0, np.zeros(2), seed=3), [1.0, 2.0])


def test_sample_action_identity_feedback():
    pol = one_step(np.eye(2), np.zeros(2), np.zeros((2, 2)))
    np.testing.assert_array_equal(sample_action(pol, 0, [3.0, -1.0], seed=0), [3.0, -1.0])


def test_sample_action_matches_reference_generator():
    K = np.array([[1.0, 0.5], [-0.2, 2.0]])
    k = np.array([0.3, -0.7])
    x = np.array([0.4, 1.1])
    pol = one_step(K, k, np.eye(2))
    z = np.random.Generator(np.random.PCG64(42)).normal(size=2)
    np.testing.assert_allclose(sample_action(pol, 0, x, seed=42), K @ x + k + z, atol=1e-15)


def test_sample_action_rejects_non_pd():
    pol = one_step(np.zeros((2, 2)), np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(NotPositiveDefiniteError):
        sample_action(pol, 0, np.zeros(2), seed=0)


def test_sample_action_checks_state_dimension(rng):
    pol = random_policy(rng, T=2, dX=3)
    with pytest.raises(ValueError):
        sample_action(pol, 0, np.zeros(2), seed=0)


def test_policy_shape_validation():
    with pytest.raises(ValueError):
        LinGaussPolicy(np.zeros((3, 2, 4)), np.zeros((2, 2)), np.zeros((3, 2, 2)))
    with pytest.raises(ValueError):
        LinGaussPolicy(np.zeros((3, 2, 4)), np.zeros((3, 2)), np.zeros((3, 3, 3)))


def test_policy_arrays_are_read_only(rng):
    pol = random_policy(rng)
    with pytest.raises(ValueError):
        pol.k[0, 0] = 1.0


@given(st.integers(1, 5), st.integers(0, 10_000))
def test_cholesky_round_trip(d, seed):
    C = random_pd(np.random.default_rng(seed), d)
    L = safe_cholesky(C)
    assert np.linalg.norm(L @ L.T - C) <= 1e-10 * np.linalg.norm(C)


def test_floor_covariance_clamps_eigenvalues():
    C = np.array([[1.0, 0.0], [0.0, -3.0]])
    w = np.linalg.eigvalsh(floor_covariance(C))
    assert w.min() >= COV_FLOOR * (1 - 1e-9)
    np.testing.assert_allclose(w.max(), 1.0)


def test_policy_serialization_round_trip(rng):
    pol = random_policy(rng, T=4)
    back = LinGaussPolicy.loads(pol.dumps())
    for a, b in ((pol.K, back.K), (pol.k, back.k), (pol.C, back.C)):
        np.testing.assert_array_equal(a, b)
    d = json.loads(pol.dumps())
    assert d["schema"] == "pigps.lingauss/1" and d["T"] == 4
    d["schema"] = "other/9"
    with pytest.raises(ValueError):
        LinGaussPolicy.from_dict(d)


def test_step_kl_identical_is_zero(rng):
    p = random_policy(rng)
    assert policy_step_kl(p, p, 1, rng.standard_normal(3)) == pytest.approx(0.0, abs=1e-12)


def test_step_kl_shared_covariance_closed_form(rng):
    C = random_pd(rng, 2)
    d = np.array([0.7, -1.3])
    p = one_step(np.zeros((2, 3)), np.zeros(2), C)
    q = one_step(np.zeros((2, 3)), d, C)
    expected = 0.5 * d @ np.linalg.solve(C, d)
    assert policy_step_kl(p, q, 0, np.ones(3)) == pytest.approx(expected, rel=1e-12)


def test_step_kl_matches_monte_carlo():
    rng = np.random.default_rng(7)
    mp, mq = rng.standard_normal(2), rng.standard_normal(2)
    Cp, Cq = random_pd(rng, 2), random_pd(rng, 2)
    p = one_step(np.zeros((2, 1)), mp, Cp)
    q = one_step(np.zeros((2, 1)), mq, Cq)
    kl = float(policy_step_kl(p, q, 0, np.zeros(1)))

    def logpdf(u, m, C):
        r = u - m
        return -0.5 * (np.einsum("ni,ij,nj->n", r, np.linalg.inv(C), r)
                       + np.log(np.linalg.det(2 * np.pi * C)))

    u = rng.multivariate_normal(mp, Cp, size=100_000)
    diff = logpdf(u, mp, Cp) - logpdf(u, mq, Cq)
    se = diff.std(ddof=1) / np.sqrt(diff.size)
    assert abs(diff.mean() - kl) < 3 * se


@given(st.integers(0, 10_000))
def test_kl_nonnegative_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    p, q = random_policy(rng), random_policy(rng)
    x = rng.standard_normal((4, 3))
    assert np.all(policy_step_kl(p, q, 0, x) > 1e-12)
    assert np.all(policy_step_kl(p, p, 0, x) <= 1e-12)


def test_gaussian_kl_rejects_non_pd():
    with pytest.raises(NotPositiveDefiniteError):
        gaussian_kl(np.zeros(2), np.eye(2), np.zeros(2), -np.eye(2))


def test_trajectory_kl_identical_and_degenerate(rng):
    p, q = random_policy(rng, T=1), random_policy(rng, T=1)
    s = random_samples(rng, N=1, T=1)
    assert trajectory_kl(p, p, s) == pytest.approx(0.0, abs=1e-12)
    assert trajectory_kl(p, q, s) == pytest.approx(float(policy_step_kl(p, q, 0, s.X[0, 0])))


def test_trajectory_kl_hand_computed():
    # T=2, dU=1, dX=1, two samples
    p = LinGaussPolicy([[[1.0]], [[0.0]]], [[0.0], [1.0]], [[[1.0]], [[2.0]]])
    q = LinGaussPolicy([[[0.0]], [[0.0]]], [[0.0], [0.0]], [[[1.0]], [[1.0]]])
    X = np.array([[[1.0], [2.0], [0.0]], [[-1.0], [0.0], [0.0]]])
    s = SampleSet(X, np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), np.zeros((2, 2)))
    # t=0: means differ by x, unit variances -> 0.5 x^2 -> avg(0.5, 0.5) = 0.5
    # t=1: N(1, 2) vs N(0, 1): 0.5 (2 + 1 - 1 - log 2)
    expected = 0.5 + 0.5 * (2.0 + 1.0 - 1.0 - np.log(2.0))
    assert trajectory_kl(p, q, s) == pytest.approx(expected, rel=1e-12)


def test_trajectory_kl_needs_samples(rng):
    p = random_policy(rng)
    with pytest.raises(ValueError):
        trajectory_kl(p, p, None)


def test_trajectory_reconstructs_actions_from_noise():
    env = PointMassEnv(goal=np.array([0.5, 0.2]), T=20)
    rng = np.random.default_rng(0)
    pol = random_policy(rng, T=20, dX=4, dU=2)
    s = sample_rollouts(pol, env, 3, seed=11)
    for i in range(3):
        tr = s.trajectory(i)
        assert isinstance(tr, Trajectory)
        for t in range(tr.T):
            u = pol.mean(t, tr.states[t]) + tr.noise[t] @ pol.chol[t].T
            np.testing.assert_allclose(u, tr.actions[t], rtol=0, atol=1e-12)


def test_rollouts_bit_identical_for_same_seed(rng):
    env = PointMassEnv(T=15)
    pol = random_policy(rng, T=15, dX=4, dU=2)
    a = sample_rollouts(pol, env, 4, seed=5, smoothing=2.0)
    b = sample_rollouts(pol, env, 4, seed=5, smoothing=2.0)
    for f in ("X", "U", "noise", "cost"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_smoothing_keeps_unit_marginals():
    M = smoothing_matrix(50, 4.0)
    np.testing.assert_allclose(np.sum(M**2, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(smoothing_matrix(5, 0.0), np.eye(5))


def test_rollout_horizon_mismatch(rng):
    with pytest.raises(ValueError):
        sample_rollouts(random_policy(rng, T=3, dX=4), PointMassEnv(T=5), 2, 0)


def test_sample_set_consistency():
    with pytest.raises(ValueError):
        SampleSet(np.zeros((2, 3, 1)), np.zeros((2, 3, 1)), np.zeros((2, 3, 1)), np.zeros((2, 3)))
