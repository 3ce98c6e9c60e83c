"""Scene construction, obstacle geometry, sampling, and coverage plumbing."""

import math

import numpy as np
import pytest

from drbrt.beliefs import GaussianBelief
from drbrt.conic import AffExpr, ConicProgram, Status
from drbrt.numerics import chi2_inverse_cdf, psd_project
from drbrt.scenes import (
    Obstacle,
    double_integrator_scene,
    load_scene,
    quadrotor_scene,
    safe_polytope_around,
    sample_query_beliefs,
    scene_from_config,
)


def test_double_integrator_matrices():
    scene = double_integrator_scene()
    a = scene.system.A
    assert np.allclose(a[:2, 2:], 0.1 * np.eye(2))  # printed upper-right block
    ddt = scene.system.noise_cov
    w_c, dt = 1e-3, 0.1
    assert ddt[0, 0] == pytest.approx(w_c * dt ** 3 / 3)
    assert ddt[0, 0] == pytest.approx(3.333e-7, rel=1e-3)
    assert ddt[0, 2] == pytest.approx(w_c * dt ** 2 / 2)
    assert ddt[2, 2] == pytest.approx(w_c * dt)
    # PSD and symmetric after factor reconstruction
    assert np.allclose(ddt, ddt.T)
    assert np.linalg.eigvalsh(ddt)[0] >= -1e-15
    assert scene.goal_radius == pytest.approx(math.sqrt(0.1 * chi2_inverse_cdf(0.99, 4)))
    assert scene.goal_radius == pytest.approx(1.15224, abs=2e-5)


def test_quadrotor_matrices():
    scene = quadrotor_scene(c=0.03, u_max=2.5)
    dt = 0.2
    a = scene.system.A
    assert np.allclose(a[:2, 2:4], dt * np.eye(2))
    assert np.allclose(a[2:4, 4:6], dt * np.eye(2))
    ddt = scene.system.noise_cov
    w_c = 0.03 ** 2 * dt
    assert ddt[0, 0] == pytest.approx(w_c * dt ** 5 / 20)
    assert ddt[4, 4] == pytest.approx(w_c * dt)
    assert scene.goal_radius == pytest.approx(math.sqrt(0.2 * chi2_inverse_cdf(0.99, 6)))
    assert scene.goal_radius == pytest.approx(1.83368, abs=2e-5)
    with pytest.raises(ValueError):
        quadrotor_scene(c=0.0)


def test_scene_hash_tracks_config():
    a = double_integrator_scene()
    b = double_integrator_scene()
    c = double_integrator_scene(w_c=2e-3)
    assert a.scene_hash == b.scene_hash
    assert a.scene_hash != c.scene_hash
    rebuilt = scene_from_config(a.config)
    assert rebuilt.scene_hash == a.scene_hash


def test_load_scene_builtins(tmp_path):
    assert load_scene("di").name == "double_integrator"
    assert load_scene("quadrotor").name == "quadrotor"
    import json

    path = tmp_path / "scene.json"
    path.write_text(json.dumps(double_integrator_scene(w_c=5e-4).config))
    assert load_scene(str(path)).w_c == 5e-4
    with pytest.raises(FileNotFoundError):
        load_scene("nonexistent")


def test_safe_polytope_no_obstacles():
    scene = double_integrator_scene(with_obstacles=False)
    cons = safe_polytope_around(np.array([5.0, 5.0, 0.0, 0.0]), scene)
    assert len(cons) == 4  # boundary only


def test_safe_polytope_box_analytic():
    # unit square centered at (-2, 0): closest point to the origin is (-1.5, 0)
    # and the separating halfspace is x1 >= -1.5
    scene = double_integrator_scene(with_obstacles=False)
    obstacle = Obstacle.box([-2.5, -0.5], [-1.5, 0.5])
    object.__setattr__(scene, "obstacles", [obstacle])
    cons = safe_polytope_around(np.zeros(4), scene)
    extra = cons[4]
    assert np.allclose(extra.a, [-1.0, 0.0, 0.0, 0.0])
    assert extra.b == pytest.approx(1.5)  # -x1 <= 1.5  <=>  x1 >= -1.5


def test_safe_polytope_rejects_interior_point():
    scene = double_integrator_scene()
    inside = np.array([3.5, 2.0, 0.0, 0.0])  # inside the first wall
    with pytest.raises(ValueError):
        safe_polytope_around(inside, scene)


def test_safe_polytope_never_intersects_obstacles():
    """LP check: safe polytope and (slightly shrunk) obstacle are disjoint."""
    scene = double_integrator_scene()
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 12:
        mu = np.concatenate([rng.uniform(0, 10, 2), rng.uniform(-1, 1, 2)])
        if not scene.in_free_space(mu):
            continue
        checked += 1
        cons = safe_polytope_around(mu, scene)
        for ob in scene.obstacles:
            prog = ConicProgram("disjoint")
            x = prog.add_vector("x", 2)
            prog.add_ineq(AffExpr.of_var(x, ob.a) + AffExpr.constant(-(ob.b - 1e-6)))
            for c in cons:
                a_pos = c.a[:2]
                prog.add_ineq(AffExpr.of_var(x, a_pos.reshape(1, -1))
                              + AffExpr.constant([-c.b]))
            t = prog.add_scalar("t")
            prog.add_ineq(AffExpr.of_var(t) + AffExpr.constant([-1.0]))
            prog.maximize(AffExpr.of_var(t))
            assert prog.solve().status == Status.INFEASIBLE


def test_sample_query_beliefs_deterministic_and_free():
    scene = double_integrator_scene()
    sigma0 = 0.01 * np.eye(4)
    a = sample_query_beliefs(scene, 40, sigma0, seed=5)
    b = sample_query_beliefs(scene, 40, sigma0, seed=5)
    assert all(np.array_equal(x.mean, y.mean) for x, y in zip(a, b))
    assert all(scene.in_free_space(q.mean) for q in a)
    c = sample_query_beliefs(scene, 40, sigma0, seed=6)
    assert not np.array_equal(a[0].mean, c[0].mean)
    # degenerate point bounds reproduce the point
    point = np.array([[2.0, 2.0], [2.0, 2.0], [0.0, 0.0], [0.0, 0.0]])
    only = sample_query_beliefs(scene, 1, sigma0, bounds=point, seed=1)
    assert np.allclose(only[0].mean, [2.0, 2.0, 0.0, 0.0])


def test_obstacle_projection_matches_clamp():
    ob = Obstacle.box([1.0, 1.0], [2.0, 3.0])
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = rng.uniform(-1, 5, 2)
        proj = ob.project(p)
        clamp = np.clip(p, [1.0, 1.0], [2.0, 3.0])
        assert np.allclose(proj, clamp, atol=1e-4)
