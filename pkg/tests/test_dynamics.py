"""Closed-loop propagation, chance margins, Monte Carlo, and probe checks."""

import math

import numpy as np
import pytest

from drbrt.beliefs import BallFlavor, BallSet, GaussianBelief
from drbrt.dynamics import (
    ClosedLoopTrajectory,
    ConstraintDomain,
    ControlPolicy,
    GoalRegion,
    HalfspaceChance,
    LinearSystem,
    chance_margin,
    closed_loop_matrix,
    monte_carlo_rollout,
    propagate,
    propagate_belief,
    verify_ball_invariance,
)
from drbrt.numerics import normal_cdf, normal_inverse_cdf

PHI_99 = normal_inverse_cdf(0.99)


def scalar_system(a=1.0, b=1.0, d=0.0):
    return LinearSystem(np.array([[a]]), np.array([[b]]), np.array([[d]]))


def test_linear_system_validation():
    with pytest.raises(ValueError):
        LinearSystem(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((2, 2)))  # singular A
    with pytest.raises(ValueError):
        LinearSystem(np.eye(2), np.zeros((3, 1)), np.zeros((2, 2)))


def test_policy_consistency_check():
    system = scalar_system()
    good = ControlPolicy.from_initial_state(system, [0.0], [[1.0]], [[[0.0]]])
    good.check_consistency(system)
    bad = ControlPolicy(np.array([[0.0], [5.0]]), np.array([[1.0]]), np.array([[[0.0]]]))
    with pytest.raises(ValueError):
        bad.check_consistency(system)


def test_propagate_annihilating_gain():
    system = scalar_system()
    policy = ControlPolicy.from_initial_state(system, [0.0], [[0.0]], [[[-1.0]]])
    traj = propagate(system, policy, [0.0], [[1.0]])
    assert traj.sigma[1][0, 0] == pytest.approx(0.0, abs=1e-15)


def test_propagate_r_shape_closed_loop():
    system = LinearSystem(np.eye(2), np.eye(2), np.zeros((2, 2)))
    gains = -0.5 * np.eye(2)[None, :, :]
    policy = ControlPolicy.from_initial_state(system, np.zeros(2), np.zeros((1, 2)), gains)
    traj = propagate(system, policy, np.zeros(2), np.zeros((2, 2)), r0=np.eye(2))
    assert np.allclose(traj.r_shape[1], 0.25 * np.eye(2))
    assert np.allclose(traj.p_shape[1], np.zeros((2, 2)))  # P propagates through A only


def test_propagate_recurrences_explicitly():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    system = LinearSystem(A, rng.standard_normal((3, 2)), 0.1 * rng.standard_normal((3, 3)))
    N = 5
    gains = 0.1 * rng.standard_normal((N, 2, 3))
    ubar = rng.standard_normal((N, 2))
    policy = ControlPolicy.from_initial_state(system, rng.standard_normal(3), ubar, gains)
    s0 = rng.standard_normal((3, 3))
    s0 = s0 @ s0.T
    p0 = rng.standard_normal((3, 3))
    p0 = p0 @ p0.T
    traj = propagate(system, policy, policy.xbar[0], s0, r0=0.5 * s0, p0=p0)
    ddt = system.noise_cov
    for k in range(N):
        acl = system.A + system.B @ policy.gains[k]
        assert np.allclose(traj.mu[k + 1], system.A @ traj.mu[k] + system.B @ ubar[k])
        assert np.allclose(traj.sigma[k + 1], acl @ traj.sigma[k] @ acl.T + ddt)
        assert np.allclose(traj.r_shape[k + 1], acl @ traj.r_shape[k] @ acl.T)
        assert np.allclose(traj.p_shape[k + 1], system.A @ traj.p_shape[k] @ system.A.T)


def test_appendix_identity_sigma_decomposition():
    """Sigma_k = Acl_{0,k-1} Sigma_0 Acl' + accumulated noise, within 1e-10."""
    rng = np.random.default_rng(8)
    A = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    system = LinearSystem(A, rng.standard_normal((3, 2)), 0.2 * rng.standard_normal((3, 2)))
    N = 6
    policy = ControlPolicy.from_initial_state(
        system, rng.standard_normal(3), rng.standard_normal((N, 2)),
        0.2 * rng.standard_normal((N, 2, 3)))
    s0 = rng.standard_normal((3, 3))
    s0 = s0 @ s0.T
    traj = propagate(system, policy, policy.xbar[0], s0)
    for k in range(N + 1):
        acl = traj.acl(0, k - 1)
        recon = acl @ s0 @ acl.T + traj.sigma_dd[k]
        assert np.abs(recon - traj.sigma[k]).max() <= 1e-10 * max(1.0, np.abs(traj.sigma[k]).max())


def test_closed_loop_matrix_cases():
    rng = np.random.default_rng(1)
    system = LinearSystem(rng.standard_normal((2, 2)) + 2 * np.eye(2),
                          rng.standard_normal((2, 1)), np.zeros((2, 1)))
    N = 4
    gains = rng.standard_normal((N, 1, 2))
    policy = ControlPolicy.from_initial_state(system, np.zeros(2), np.zeros((N, 1)), gains)
    assert np.array_equal(closed_loop_matrix(policy, system, 2, 1), np.eye(2))
    a1 = closed_loop_matrix(policy, system, 1, 1)
    assert np.allclose(a1, system.A + system.B @ gains[1])
    explicit = np.eye(2)
    for t in range(4):
        explicit = (system.A + system.B @ gains[t]) @ explicit
    assert np.abs(closed_loop_matrix(policy, system, 0, 3) - explicit).max() <= 1e-12
    with pytest.raises(IndexError):
        closed_loop_matrix(policy, system, 0, 7)


def test_chance_margin_examples():
    c = HalfspaceChance(np.array([1.0, 0.0]), 10.0, 0.01, ConstraintDomain.STATE)
    mu = np.array([3.0, 1.0])
    assert chance_margin(c, mu) == pytest.approx(7.0)
    assert chance_margin(c, np.zeros(2), sigma=np.eye(2)) == pytest.approx(10.0 - PHI_99)
    assert chance_margin(c, np.zeros(2), sigma=np.eye(2)) == pytest.approx(7.673652, abs=5e-7)
    # exact boundary
    c2 = HalfspaceChance(np.array([1.0, 0.0]), PHI_99, 0.01)
    assert chance_margin(c2, np.zeros(2), sigma=np.eye(2)) == pytest.approx(0.0, abs=1e-12)
    # control domain substitutes a'K and adds the feedforward
    cu = HalfspaceChance(np.array([1.0]), 1.0, 0.01, ConstraintDomain.CONTROL)
    k = np.array([[2.0, 0.0]])
    slack = chance_margin(cu, np.array([0.5, 0.0]), sigma=np.eye(2), ubar=np.array([0.1]),
                          gain=k, xbar=np.zeros(2))
    assert slack == pytest.approx(1.0 - (0.1 + 1.0 + PHI_99 * 2.0))


def test_monte_carlo_deterministic_cases():
    system = scalar_system(d=0.0)
    policy = ControlPolicy.from_initial_state(system, [0.0], [[0.5]], [[[0.0]]])
    belief = GaussianBelief([0.0], [[0.0]])
    tight = HalfspaceChance(np.array([1.0]), 0.4, 0.01, ConstraintDomain.CONTROL)
    stats = monte_carlo_rollout(system, policy, belief, [tight],
                                GoalRegion.ball(np.array([0.5]), 0.1), 500, seed=7)
    # all samples identical: the control 0.5 > 0.4 always violates, goal always hit
    assert np.array_equal(stats.segment_frequencies[0], np.array([[1.0, 0.0]]))
    assert stats.goal_frequency == 1.0
    slack = chance_margin(tight, np.array([0.0]), ubar=np.array([0.5]),
                          gain=np.zeros((1, 1)), xbar=np.zeros(1))
    assert (slack < 0) == (stats.segment_frequencies[0][0, 0] == 1.0)


def test_monte_carlo_matches_normal_cdf():
    # terminal distribution N(0, 1): P(|x| <= 1.959964) ~= 0.95
    system = scalar_system(a=1.0, b=1.0, d=1.0)
    policy = ControlPolicy.from_initial_state(system, [0.0], [[0.0]], [[[0.0]]])
    belief = GaussianBelief([0.0], [[0.0]])
    n = 10_000
    stats = monte_carlo_rollout(system, policy, belief, [],
                                GoalRegion.ball(np.zeros(1), 1.959964), n, seed=11)
    sigma_bin = math.sqrt(0.95 * 0.05 / n)
    assert abs(stats.goal_frequency - 0.95) <= 3 * sigma_bin


def test_monte_carlo_halfspace_frequency_consistency():
    system = scalar_system(a=1.0, b=1.0, d=0.5)
    policy = ControlPolicy.from_initial_state(system, [1.0], [[0.2]], [[[0.0]]])
    belief = GaussianBelief([1.0], [[0.3]])
    c = HalfspaceChance(np.array([1.0]), 1.5, 0.01, ConstraintDomain.STATE)
    n = 20_000
    stats = monte_carlo_rollout(system, policy, belief, [c],
                                GoalRegion.ball(np.zeros(1), 100.0), n, seed=3)
    for k, (mu, var) in enumerate([(1.0, 0.3), (1.2, 0.3 + 0.25)]):
        p_true = 1.0 - normal_cdf((c.b - mu) / math.sqrt(var))
        sig = math.sqrt(max(p_true * (1 - p_true), 1e-9) / n)
        assert abs(stats.segment_frequencies[0][0, k] - p_true) <= 4 * sig


def test_monte_carlo_seed_reproducibility():
    system = scalar_system(d=0.3)
    policy = ControlPolicy.from_initial_state(system, [0.0], [[0.1]], [[[-0.5]]])
    belief = GaussianBelief([0.2], [[0.4]])
    goal = GoalRegion.ball(np.zeros(1), 1.0)
    s1 = monte_carlo_rollout(system, policy, belief, [], goal, 3000, seed=99)
    s2 = monte_carlo_rollout(system, policy, belief, [], goal, 3000, seed=99)
    assert s1.goal_frequency == s2.goal_frequency
    s3 = monte_carlo_rollout(system, policy, belief, [], goal, 3000, seed=100)
    assert s1.goal_frequency != s3.goal_frequency


def test_goal_region_ellipsoid_ball():
    goal = GoalRegion.ellipsoid_ball(np.zeros(2), np.diag([4.0, 1.0]), 0.5)
    pts = np.array([[2.4, 0.0], [2.6, 0.0], [0.0, 1.4], [0.0, 1.6]])
    assert goal.contains_points(pts).tolist() == [True, False, True, False]


def test_propagate_belief_feedback_mean():
    system = scalar_system()
    policy = ControlPolicy.from_initial_state(system, [0.0], [[0.0]], [[[-0.5]]])
    mu, sigma = propagate_belief(system, policy, GaussianBelief([2.0], [[1.0]]))
    assert mu[1][0] == pytest.approx(1.0)  # 2 + (-0.5 * 2)
    assert sigma[1][0, 0] == pytest.approx(0.25)


def test_verify_ball_invariance_annihilating_edge():
    # K = -1 drives any deviation to zero in one step
    system = scalar_system(d=0.0)
    policy = ControlPolicy.from_initial_state(system, [0.0], [[0.0]], [[[-1.0]]])
    source = BallSet(np.zeros(1), 1.0, 0.01)
    target = BallSet(np.zeros(1), 1.0, 0.01)
    cons = [HalfspaceChance(np.array([1.0]), 1.0, 0.01, ConstraintDomain.CONTROL),
            HalfspaceChance(np.array([-1.0]), 1.0, 0.01, ConstraintDomain.CONTROL)]
    assert verify_ball_invariance(system, policy, source, target, cons, 0.0, 120)
    # shrinking the target by 10% breaks some probe
    small = BallSet(np.zeros(1), 0.45, 0.01)
    policy2 = ControlPolicy.from_initial_state(system, [0.0], [[0.0]], [[[-0.5]]])
    assert not verify_ball_invariance(system, scalar_policy_half := policy2, source, small,
                                      [], 0.0, 120)


def test_verify_ball_invariance_zero_radius_source():
    system = scalar_system(d=0.0)
    policy = ControlPolicy.from_initial_state(system, [0.0], [[0.0]], [[[-1.0]]])
    lam = 0.01
    source = BallSet(np.zeros(1), PHI_99 * math.sqrt(lam), 0.01)  # only Sigma = lam*I fits
    target = BallSet(np.zeros(1), 1.0, 0.01)
    assert verify_ball_invariance(system, policy, source, target, [], lam, 60)
