"""Benchmark scenes, obstacle handling, query sampling, and coverage evaluation.

A scene bundles the linear system, state/control chance constraints, convex
obstacles (position-space polytopes), goal definition, linearization
references, and sampling parameters.  Scenes are value objects built from a
JSON config; the canonical config hash ties tree files to their scene.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .beliefs import GaussianBelief
from .conic import AffExpr, ConicProgram, Status
from .dynamics import ConstraintDomain, GoalRegion, HalfspaceChance, LinearSystem
from .numerics import chi2_inverse_cdf, psd_project, psd_sqrt
from .steering import SteeringRefs


@dataclass(frozen=True)
class Obstacle:
    """Convex polytope in position space: {p : A p <= b}, with vertices kept
    for plotting and hashing."""

    a: np.ndarray  # (m, d)
    b: np.ndarray  # (m,)
    vertices: np.ndarray  # (k, d)

    @staticmethod
    def box(lo, hi) -> "Obstacle":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        d = lo.shape[0]
        a = np.vstack([np.eye(d), -np.eye(d)])
        b = np.concatenate([hi, -lo])
        corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]) \
            if d == 2 else np.stack(np.meshgrid(*zip(lo, hi)), -1).reshape(-1, d)
        return Obstacle(a, b, corners)

    def contains(self, p: np.ndarray, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float).reshape(-1)
        return bool(np.all(self.a @ p <= self.b + tol))

    def project(self, p: np.ndarray) -> np.ndarray:
        """Closest point of the polytope to p (small conic QP)."""
        p = np.asarray(p, dtype=float).reshape(-1)
        if self.contains(p):
            return p.copy()
        prog = ConicProgram("obstacle_projection")
        x = prog.add_vector("x", p.shape[0])
        t = prog.add_scalar("t")
        prog.add_soc(AffExpr.of_var(t), AffExpr.of_var(x) + AffExpr.constant(-p))
        prog.add_ineq(AffExpr.of_var(x, self.a) + AffExpr.constant(-self.b))
        prog.minimize(AffExpr.of_var(t))
        sol = prog.solve()
        if sol.status != Status.OPTIMAL:
            raise RuntimeError("obstacle projection failed")
        return sol.value(x)


@dataclass(frozen=True)
class Scene:
    name: str
    system: LinearSystem
    horizon: int
    dt: float
    w_c: float
    pos_dims: tuple
    boundary: list  # position halfspaces (a_pos, b) pairs
    obstacles: list
    eps_state: float
    eps_control: float
    eps_sets: float
    control_limits: list  # (a_ctrl, b) pairs
    goal_center: np.ndarray
    goal_shape: np.ndarray  # ellipsoid component of the goal region
    goal_radius: float
    sigma_query: np.ndarray  # covariance for ellipsoid maximization
    refs_ball: SteeringRefs
    refs_ell: SteeringRefs
    r_sample: np.ndarray
    query_bounds: np.ndarray  # (n, 2) mean-sampling box
    config: dict = field(repr=False, default_factory=dict)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def scene_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()[:16]

    # -- constraints --------------------------------------------------------
    def _lift(self, a_pos: np.ndarray) -> np.ndarray:
        a = np.zeros(self.n)
        for v, d in zip(a_pos, self.pos_dims):
            a[d] = v
        return a

    def boundary_constraints(self) -> list:
        return [HalfspaceChance(self._lift(a), b, self.eps_state, ConstraintDomain.STATE)
                for a, b in self.boundary]

    def control_constraints(self) -> list:
        return [HalfspaceChance(np.asarray(a, dtype=float), b, self.eps_control,
                                ConstraintDomain.CONTROL)
                for a, b in self.control_limits]

    def position_of(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1)[list(self.pos_dims)]

    def in_free_space(self, x: np.ndarray) -> bool:
        p = self.position_of(x)
        for a, b in self.boundary:
            if float(np.asarray(a) @ p) > b:
                return False
        return not any(ob.contains(p) for ob in self.obstacles)

    def goal_region(self) -> GoalRegion:
        if float(np.abs(self.goal_shape).max()) == 0.0:
            return GoalRegion.ball(self.goal_center, self.goal_radius)
        return GoalRegion.ellipsoid_ball(self.goal_center, self.goal_shape, self.goal_radius)


def safe_polytope_around(mu_q: np.ndarray, scene: Scene) -> list:
    """Separating halfspace per obstacle (through its closest point to mu_q)
    plus the scene boundary, as state chance constraints.

    The returned polytope contains mu_q and touches no obstacle interior.
    """
    p = scene.position_of(mu_q)
    cons = scene.boundary_constraints()
    for ob in scene.obstacles:
        if ob.contains(p):
            raise ValueError("query mean lies inside an obstacle")
        proj = ob.project(p)
        gap = p - proj
        norm = float(np.linalg.norm(gap))
        if norm <= 1e-9:
            raise ValueError("query mean lies on an obstacle boundary")
        normal = gap / norm
        # anchor the offset at the obstacle's exact support along the normal
        # (the projected point itself is solver-accurate only to ~1e-6)
        support = float(np.max(ob.vertices @ normal))
        # keep normal' x >= support, written as (-normal)' x <= -support
        cons.append(HalfspaceChance(scene._lift(-normal), -support,
                                    scene.eps_state, ConstraintDomain.STATE))
    return cons


# ---------------------------------------------------------------------------
# scene factories
# ---------------------------------------------------------------------------

DEFAULT_DI_OBSTACLES = [
    ((3.0, 0.0), (4.0, 4.5)),
    ((3.0, 5.5), (4.0, 10.0)),
    ((6.0, 0.0), (7.0, 2.0)),
    ((6.0, 3.0), (7.0, 10.0)),
]


def _kron_psd(block: np.ndarray) -> np.ndarray:
    return np.kron(block, np.ones((2, 2)))


def double_integrator_scene(w_c: float = 1e-3, u_max: float = 10.0,
                            obstacles=None, with_obstacles: bool = True) -> Scene:
    """Planar double integrator in a 10x10 box with two obstacle walls."""
    dt = 0.1
    a = np.block([[np.eye(2), dt * np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    b = np.vstack([dt ** 2 / 2 * np.eye(2), dt * np.eye(2)])
    ddt = w_c * np.block([
        [dt ** 3 / 3 * np.ones((2, 2)), dt ** 2 / 2 * np.ones((2, 2))],
        [dt ** 2 / 2 * np.ones((2, 2)), dt * np.ones((2, 2))],
    ])
    d = _factor_of(ddt)
    eps = 0.01
    goal_center = np.array([9.0, 5.0, 0.0, 0.0])
    goal_radius = math.sqrt(0.1 * chi2_inverse_cdf(0.99, 4))
    boundary = [((1.0, 0.0), 10.0), ((-1.0, 0.0), 0.0), ((0.0, 1.0), 10.0), ((0.0, -1.0), 0.0)]
    control = [((1.0, 0.0), u_max), ((-1.0, 0.0), u_max), ((0.0, 1.0), u_max),
               ((0.0, -1.0), u_max)]
    obs_spec = DEFAULT_DI_OBSTACLES if obstacles is None else obstacles
    obs = [Obstacle.box(lo, hi) for lo, hi in obs_spec] if with_obstacles else []
    refs_ball = SteeringRefs(np.diag([0.01, 0.01, 0.75, 0.75]), 15.0 * np.eye(2),
                             np.eye(4), np.diag([0.05, 0.05, 0.5, 0.5]), r_ref=goal_radius / 2)
    refs_ell = SteeringRefs(np.diag([0.05, 0.05, 0.5, 0.5]), 15.0 * np.eye(2),
                            np.eye(4), np.diag([0.05, 0.05, 0.5, 0.5]), r_ref=goal_radius / 2)
    config = {
        "name": "double_integrator", "dt": dt, "w_c": w_c, "u_max": u_max,
        "horizon": 20, "eps": eps, "goal_center": goal_center.tolist(),
        "goal_shape_scale": 0.1, "goal_radius": goal_radius,
        "obstacles": [list(map(list, ob)) for ob in obs_spec] if with_obstacles else [],
        "boundary": [[list(a_), b_] for a_, b_ in boundary],
        "query_bounds": [[0.0, 10.0], [0.0, 10.0], [-1.0, 1.0], [-1.0, 1.0]],
    }
    return Scene(
        name="double_integrator",
        system=LinearSystem(a, b, d), horizon=20, dt=dt, w_c=w_c,
        pos_dims=(0, 1), boundary=[(np.asarray(aa), bb) for aa, bb in boundary],
        obstacles=obs, eps_state=eps, eps_control=eps, eps_sets=eps,
        control_limits=control, goal_center=goal_center,
        goal_shape=0.1 * np.eye(4), goal_radius=goal_radius,
        sigma_query=np.diag([0.05, 0.05, 0.025, 0.025]),
        refs_ball=refs_ball, refs_ell=refs_ell,
        r_sample=np.array([1.25, 1.25, 1.25, 1.25]),
        query_bounds=np.array(config["query_bounds"]),
        config=config,
    )


def quadrotor_scene(c: float = 0.03, u_max: float = 2.5) -> Scene:
    """Planar quadrotor (position/velocity/acceleration) in open space."""
    if c <= 0 or u_max <= 0:
        raise ValueError("noise scale and control bound must be positive")
    dt = 0.2
    eye, zero = np.eye(2), np.zeros((2, 2))
    a = np.block([[eye, dt * eye, zero], [zero, eye, dt * eye], [zero, zero, eye]])
    b = np.vstack([zero, zero, dt * eye])
    w_c = c ** 2 * dt
    ddt = w_c * np.block([
        [dt ** 5 / 20 * np.ones((2, 2)), dt ** 4 / 8 * np.ones((2, 2)),
         dt ** 3 / 6 * np.ones((2, 2))],
        [dt ** 4 / 8 * np.ones((2, 2)), dt ** 3 / 3 * np.ones((2, 2)),
         dt ** 2 / 2 * np.ones((2, 2))],
        [dt ** 3 / 6 * np.ones((2, 2)), dt ** 2 / 2 * np.ones((2, 2)),
         dt * np.ones((2, 2))],
    ])
    d = _factor_of(ddt)
    eps = 0.01
    goal_radius = math.sqrt(0.2 * chi2_inverse_cdf(0.99, 6))
    control = [((1.0, 0.0), u_max), ((-1.0, 0.0), u_max), ((0.0, 1.0), u_max),
               ((0.0, -1.0), u_max)]
    refs = SteeringRefs(1.2 * np.eye(6), 0.5 * np.eye(2), np.eye(6), 1.2 * np.eye(6),
                        r_ref=goal_radius / 2)
    config = {
        "name": "quadrotor", "dt": dt, "c": c, "w_c": w_c, "u_max": u_max,
        "horizon": 20, "eps": eps, "goal_shape_scale": 0.5, "goal_radius": goal_radius,
        "query_bounds": [[-10.0, 10.0], [-10.0, 10.0], [0.0, 0.0], [0.0, 0.0],
                         [0.0, 0.0], [0.0, 0.0]],
    }
    return Scene(
        name="quadrotor",
        system=LinearSystem(a, b, d), horizon=20, dt=dt, w_c=w_c,
        pos_dims=(0, 1), boundary=[], obstacles=[], eps_state=eps, eps_control=eps,
        eps_sets=eps, control_limits=control, goal_center=np.zeros(6),
        goal_shape=0.5 * np.eye(6), goal_radius=goal_radius,
        sigma_query=np.diag([0.1, 0.1, 0.05, 0.05, 0.0125, 0.0125]),
        refs_ball=refs, refs_ell=refs,
        r_sample=np.array([5.0, 5.0, 2.5, 2.5, 0.675, 0.675]),
        query_bounds=np.array(config["query_bounds"]),
        config=config,
    )


def _factor_of(ddt: np.ndarray) -> np.ndarray:
    """Noise factor D with D D' equal to the given PSD matrix (rank-truncated)."""
    ddt = psd_project(ddt, rel_tol=1e-8)
    w, v = np.linalg.eigh(ddt)
    keep = w > 1e-14 * max(float(w[-1]), 1e-300)
    if not keep.any():
        return np.zeros((ddt.shape[0], 1))
    return v[:, keep] * np.sqrt(w[keep])


def scene_from_config(config: dict) -> Scene:
    name = config.get("name")
    if name == "double_integrator":
        obstacles = [tuple(map(tuple, ob)) for ob in config.get("obstacles", [])] or None
        scene = double_integrator_scene(
            w_c=config.get("w_c", 1e-3), u_max=config.get("u_max", 10.0),
            obstacles=obstacles, with_obstacles=bool(config.get("obstacles", True)))
    elif name == "quadrotor":
        scene = quadrotor_scene(c=config.get("c", 0.03), u_max=config.get("u_max", 2.5))
    else:
        raise ValueError(f"unknown scene name {name!r}")
    return scene


def load_scene(path_or_name: str) -> Scene:
    import os

    if os.path.exists(path_or_name):
        with open(path_or_name) as fh:
            return scene_from_config(json.load(fh))
    if path_or_name in ("di", "double_integrator"):
        return double_integrator_scene()
    if path_or_name == "quadrotor":
        return quadrotor_scene()
    from importlib import resources

    candidate = resources.files("drbrt").joinpath(f"data/{path_or_name}.json")
    if candidate.is_file():
        return scene_from_config(json.loads(candidate.read_text()))
    raise FileNotFoundError(f"scene {path_or_name!r} not found")


# ---------------------------------------------------------------------------
# query sampling and coverage
# ---------------------------------------------------------------------------

def sample_query_beliefs(scene: Scene, count: int, sigma0: np.ndarray, bounds=None,
                         seed: int = 0) -> list:
    """Gaussian query beliefs with means uniform in the bounds box, rejected
    against obstacles; fixed covariance; deterministic per seed."""
    if count < 1:
        raise ValueError("count must be positive")
    bounds = np.asarray(scene.query_bounds if bounds is None else bounds, dtype=float)
    sigma0 = psd_project(np.asarray(sigma0, dtype=float), rel_tol=1e-8)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    beliefs = []
    attempts = 0
    while len(beliefs) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise RuntimeError("query sampling exhausted: free space too small")
        mean = bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.random(bounds.shape[0])
        if not scene.in_free_space(mean):
            continue
        beliefs.append(GaussianBelief(mean, sigma0))
    return beliefs


@dataclass
class CoverageReport:
    fractions: list          # per tree (seed), connected fraction
    hop_histogram: dict      # hops -> count over all connected queries
    n_queries: int

    def summary(self) -> dict:
        arr = np.asarray(self.fractions, dtype=float)
        return {
            "min": float(arr.min()),
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "p75": float(np.percentile(arr, 75)),
            "p90": float(np.percentile(arr, 90)),
            "max": float(arr.max()),
        }


def evaluate_coverage(trees, queries, mode: str = "membership",
                      scene: Scene | None = None) -> CoverageReport:
    """Connected fraction per tree over a shared query list."""
    from .brt import connect_query

    hashes = {t.scene_hash for t in trees}
    if len(hashes) > 1:
        raise ValueError("trees were built on different scenes")
    if scene is not None and hashes and scene.scene_hash not in hashes:
        raise ValueError("query scene does not match the trees")
    fractions = []
    hops: dict[int, int] = {}
    for tree in trees:
        connected = 0
        for belief in queries:
            path = connect_query(tree, belief, mode=mode, scene=scene)
            if path is not None:
                connected += 1
                h = len(path)
                hops[h] = hops.get(h, 0) + 1
        fractions.append(connected / len(queries))
    return CoverageReport(fractions, hops, len(queries))


def _sweep_cell_worker(args):
    config, seed, n_iter, n_queries, sigma0_scale = args
    from .brt import build_paired_ball_trees

    scene = scene_from_config(config)
    ours, base = build_paired_ball_trees(scene, n_iter, seed=seed)
    queries = sample_query_beliefs(scene, n_queries, sigma0_scale * np.eye(scene.n),
                                   seed=seed + 7_777)
    rep = evaluate_coverage([ours, base], queries)
    return rep.fractions[0], rep.fractions[1]


def sweep_noise_control(scene_family, wc_grid, umax_grid, seeds, n_iter: int,
                        n_queries: int = 100, sigma0_scale: float = 0.01,
                        jobs: int = 1, progress=None) -> dict:
    """Paired coverage-gain sweep over (W_c, u_max) cells.

    Gain per cell is the mean over seeds of 1 - coverage(baseline)/coverage(ours)
    with paired samples; cells where ours never connects are undefined (nan).
    """
    if not len(wc_grid) or not len(umax_grid):
        raise ValueError("sweep grids must be nonempty")
    tasks = []
    for i, w_c in enumerate(wc_grid):
        for j, u_max in enumerate(umax_grid):
            config = scene_family(w_c, u_max).config
            for seed in seeds:
                tasks.append(((i, j, w_c, u_max, seed),
                              (config, seed, n_iter, n_queries, sigma0_scale)))
    if jobs > 1:
        from multiprocessing import Pool

        with Pool(jobs) as pool:
            outcomes = pool.map(_sweep_cell_worker, [t[1] for t in tasks])
    else:
        outcomes = [_sweep_cell_worker(t[1]) for t in tasks]
    per_cell: dict[tuple, list] = {}
    for (i, j, w_c, u_max, seed), (f_ours, f_base) in zip((t[0] for t in tasks), outcomes):
        per_cell.setdefault((i, j, w_c, u_max), []).append((f_ours, f_base))
        if progress:
            progress(w_c=w_c, u_max=u_max, seed=seed, ours=f_ours, base=f_base)
    gains = np.full((len(wc_grid), len(umax_grid)), np.nan)
    fractions = np.zeros((len(wc_grid), len(umax_grid)))
    cells = []
    for (i, j, w_c, u_max), pairs in sorted(per_cell.items()):
        fr = [p[0] for p in pairs]
        gain_terms = [1.0 - p[1] / p[0] for p in pairs if p[0] > 0]
        fractions[i, j] = float(np.mean(fr))
        if gain_terms:
            gains[i, j] = float(np.mean(gain_terms))
        cells.append({"w_c": w_c, "u_max": u_max,
                      "gain": None if math.isnan(gains[i, j]) else gains[i, j],
                      "fraction": fractions[i, j]})
    return {"gains": gains, "fractions": fractions, "cells": cells,
            "wc_grid": list(wc_grid), "umax_grid": list(umax_grid)}
