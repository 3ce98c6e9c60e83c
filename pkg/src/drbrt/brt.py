"""Backward reachable trees: data structure, builders, queries, serialization.

Nodes hold ambiguity-set unions (ball + covariance-cap for Algorithm-1 trees,
ellipsoid-ball + ellipsoid for Algorithm-2 trees); edges hold the feedback
policies steering each node's set into its parent's set.  Paired builders
drive a baseline tree from the same sampled (node, query-mean) stream so the
baseline's node sets are dominated by construction.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import beliefs as bel
from .conic import Status
from .dynamics import ControlPolicy, chance_margin, propagate
from .numerics import Ellipsoid, ellipsoid_contained, sym_eig_extremes
from .scenes import Scene, safe_polytope_around
from .steering import (
    EdgeResult,
    TargetBall,
    TargetEllBall,
    max_cov_ball_radius,
    max_cov_ball_ub,
    max_ell_ball_radius,
    max_ell_ball_ub,
    maxcovar_baseline,
    maxcovarell_baseline,
    maxellipsoid_baseline,
)

TREE_FORMAT_VERSION = "brt-1"


class BuilderKind(str, enum.Enum):
    MAX_COV_BALL = "max_cov_ball"
    MAX_COVAR = "max_covar"
    RAND_COVAR = "rand_covar"
    MAX_ELL_BALL = "max_ell_ball"
    MAX_ELLIPSOID = "max_ellipsoid"
    MAX_ELLIPSOID_FIXED_SIGMA = "max_ellipsoid_fixed_sigma"

    @property
    def is_ellipsoid_family(self) -> bool:
        return self in (BuilderKind.MAX_ELL_BALL, BuilderKind.MAX_ELLIPSOID,
                        BuilderKind.MAX_ELLIPSOID_FIXED_SIGMA)


@dataclass
class BrtNode:
    mu: np.ndarray
    sigma: np.ndarray
    radius: float
    sigma_ell: np.ndarray | None = None
    shape: np.ndarray | None = None
    parent: int | None = None
    edge: int | None = None
    children: list = field(default_factory=list)
    depth: int = 0


@dataclass
class BrtEdge:
    child: int
    parent: int
    policy: ControlPolicy
    s_witness: np.ndarray | None = None


@dataclass
class BrtTree:
    kind: BuilderKind
    seed: int
    scene_hash: str
    epsilon: float
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def node_set(self, idx: int) -> bel.NodeSet:
        node = self.nodes[idx]
        flavor = bel.BallFlavor.CHI_SQ if idx == 0 else bel.BallFlavor.PHI
        if self.kind.is_ellipsoid_family:
            primary = bel.EllBallSet(node.mu, node.shape, node.radius, self.epsilon, flavor)
            secondary = bel.EllSet(node.mu, node.sigma, node.shape)
        else:
            primary = bel.BallSet(node.mu, node.radius, self.epsilon, flavor)
            secondary = bel.MaxCovSet(node.mu, node.sigma)
        return bel.NodeSet(primary, secondary)

    def target_for(self, idx: int):
        node = self.nodes[idx]
        ns = self.node_set(idx)
        if self.kind.is_ellipsoid_family:
            return TargetEllBall(node.mu, node.shape, node.radius, ns.primary.quantile)
        return TargetBall(node.mu, node.radius, ns.primary.quantile)

    def add_node(self, node: BrtNode, edge: BrtEdge | None = None) -> int:
        idx = len(self.nodes)
        if edge is not None:
            edge_idx = len(self.edges)
            self.edges.append(edge)
            node.edge = edge_idx
            node.depth = self.nodes[node.parent].depth + 1
            self.nodes[node.parent].children.append(idx)
        self.nodes.append(node)
        return idx

    def path_to_root(self, idx: int) -> list:
        """Edge indices from the node down to the root, in rollout order."""
        path = []
        cur = idx
        while self.nodes[cur].parent is not None:
            path.append(self.nodes[cur].edge)
            cur = self.nodes[cur].parent
        return path


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def tree_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def rand_select_node(tree: BrtTree, rng: np.random.Generator) -> int:
    if not tree.nodes:
        raise ValueError("tree is empty")
    return int(rng.integers(0, len(tree.nodes)))


def rand_mean_around(center: np.ndarray, r_sample: np.ndarray, scene: Scene,
                     rng: np.random.Generator, max_attempts: int = 100):
    """Uniform sample in the axis-aligned box center +- r_sample, rejected
    against the state polytope and obstacles; None after 100 rejections."""
    center = np.asarray(center, dtype=float).reshape(-1)
    half = np.asarray(r_sample, dtype=float).reshape(-1)
    for _ in range(max_attempts):
        mu_q = center + half * (2.0 * rng.random(center.shape[0]) - 1.0)
        if scene.in_free_space(mu_q):
            return mu_q
    return None


# ---------------------------------------------------------------------------
# edge audits
# ---------------------------------------------------------------------------

def verify_edge(scene: Scene, tree: BrtTree, idx: int, tol: float = 1e-6) -> bool:
    """Analytic soundness re-check of the edge certifying node idx."""
    node = tree.nodes[idx]
    if node.parent is None:
        return True
    edge = tree.edges[node.edge]
    policy = edge.policy
    state_cons = edge_state_constraints(scene, node.mu)
    control_cons = scene.control_constraints()
    target = tree.target_for(node.parent)
    n = scene.n
    p0 = node.shape if tree.kind.is_ellipsoid_family else None
    # covariance-cap part: the node covariance propagates into the parent set
    traj = propagate(scene.system, policy, node.mu, node.sigma, p0=p0)
    if not _margins_ok(scene, policy, traj, state_cons, control_cons, with_r=False,
                       with_p=p0 is not None, tol=tol):
        return False
    terminal_belief = bel.GaussianBelief(traj.mu[-1], traj.sigma[-1])
    if not bel.contains(tree.node_set(node.parent), terminal_belief, tol=tol):
        return False
    if tree.kind.is_ellipsoid_family and p0 is not None and \
            float(np.abs(traj.p_shape[-1]).max()) > 0:
        # the witness ellipsoid must land in the parent set: either inside the
        # parent ellipsoid directly, or inside via a shifted anchor whose mean
        # gap fits into the parent ball radius
        parent = tree.nodes[node.parent]
        parent_ell = Ellipsoid(parent.mu, parent.shape)
        lam_n = max(sym_eig_extremes(traj.sigma[-1])[1], 0.0)
        direct = ellipsoid_contained(Ellipsoid(traj.mu[-1], traj.p_shape[-1]),
                                     parent_ell, tol=tol) and \
            lam_n <= sym_eig_extremes(parent.sigma)[0] + tol
        if not direct:
            anchor = edge.s_witness
            if anchor is None:
                from .steering import solve_s_star

                try:
                    anchor = solve_s_star(traj.mu[-1], traj.p_shape[-1], parent.mu,
                                          parent.shape)
                except ValueError:
                    return False
            if not ellipsoid_contained(Ellipsoid(anchor, traj.p_shape[-1]), parent_ell,
                                       tol=tol):
                return False
            gap = float(np.linalg.norm(traj.mu[-1] - anchor))
            if gap + target.quantile * math.sqrt(lam_n) > target.radius + tol:
                return False
    # ball part: beliefs within the certified radius land in the parent set
    if node.radius > 0.0:
        r0 = node.radius ** 2 * np.eye(n)
        traj = propagate(scene.system, policy, node.mu, np.zeros((n, n)), r0=r0, p0=p0)
        if not _margins_ok(scene, policy, traj, state_cons, control_cons, with_r=True,
                           with_p=p0 is not None, tol=tol):
            return False
        lhs = target.quantile * math.sqrt(max(sym_eig_extremes(traj.sigma[-1])[1], 0.0))
        lhs += math.sqrt(max(sym_eig_extremes(traj.r_shape[-1])[1], 0.0))
        anchor = edge.s_witness if edge.s_witness is not None else target.center
        lhs += float(np.linalg.norm(traj.mu[-1] - anchor))
        if lhs > target.radius + tol:
            return False
    return True


def _margins_ok(scene, policy, traj, state_cons, control_cons, with_r, with_p, tol):
    for k in range(policy.horizon + 1):
        r_k = traj.r_shape[k] if with_r else None
        p_k = traj.p_shape[k] if with_p else None
        for c in state_cons:
            if chance_margin(c, traj.mu[k], traj.sigma[k], r_k, p_k) < -tol:
                return False
        if k == policy.horizon:
            break
        for c in control_cons:
            if chance_margin(c, traj.mu[k], traj.sigma[k], r_k, None,
                             ubar=policy.ubar[k], gain=policy.gains[k]) < -tol:
                return False
    return True


def edge_state_constraints(scene: Scene, mu_q: np.ndarray) -> list:
    return safe_polytope_around(mu_q, scene)


# ---------------------------------------------------------------------------
# Algorithm 1 (ball family)
# ---------------------------------------------------------------------------

def _root_sigma(scene: Scene) -> np.ndarray:
    """Largest isotropic covariance whose (1-eps) chi-square contour fits the
    goal ball."""
    lam = scene.goal_radius ** 2 / chi2_of(scene)
    return lam * np.eye(scene.n)


def chi2_of(scene: Scene) -> float:
    from .numerics import chi2_inverse_cdf

    return chi2_inverse_cdf(1.0 - scene.eps_sets, scene.n)


def _ball_root(scene: Scene, kind: BuilderKind, seed: int) -> BrtTree:
    tree = BrtTree(kind, seed, scene.scene_hash, scene.eps_sets)
    tree.add_node(BrtNode(mu=scene.goal_center.copy(), sigma=_root_sigma(scene),
                          radius=scene.goal_radius))
    return tree


def _ball_iteration(scene: Scene, tree: BrtTree, i_k: int, mu_q: np.ndarray,
                    kind: BuilderKind, rng, tolerance=None) -> dict:
    """One Algorithm-1 expansion attempt against node i_k; returns a log entry."""
    node = tree.nodes[i_k]
    state_cons = edge_state_constraints(scene, mu_q)
    control_cons = scene.control_constraints()
    target = tree.target_for(i_k)
    refs = scene.refs_ball
    cap = sym_eig_extremes(node.sigma)[0]
    entry = {"node": i_k, "mu_q": mu_q.tolist(), "kind": kind.value}
    mc = ub = None
    if kind == BuilderKind.RAND_COVAR:
        lam = float(rng.random() ** 2) * sym_eig_extremes(_root_sigma(scene))[0]
        mc = maxcovar_baseline(scene.system, mu_q, node.mu, cap, scene.horizon, refs,
                               state_cons, control_cons, tolerance=tolerance,
                               sigma0_fixed=lam * np.eye(scene.n))
        entry["lambda_rand"] = lam
    else:
        mc = maxcovar_baseline(scene.system, mu_q, node.mu, cap, scene.horizon, refs,
                               state_cons, control_cons, tolerance=tolerance)
        if kind == BuilderKind.MAX_COV_BALL and target.radius > 0.0:
            ub = max_cov_ball_ub(scene.system, mu_q, target, scene.horizon, refs,
                                 state_cons, control_cons, tolerance=tolerance)
    entry["lambda_mc"] = mc.lambda_min_sigma0() if mc.ok else None
    entry["lambda_ub"] = ub.lambda_min_sigma0() if ub is not None and ub.ok else None
    chosen = None
    if mc.ok:
        chosen = mc
    if ub is not None and ub.ok and (chosen is None or
                                     ub.lambda_min_sigma0() >= chosen.lambda_min_sigma0()):
        chosen = ub
    if chosen is None:
        entry["status"] = "infeasible"
        return entry
    entry["chosen"] = "ub" if chosen is ub else "mc"
    radius = 0.0
    if kind == BuilderKind.MAX_COV_BALL:
        rad = max_cov_ball_radius(scene.system, chosen.policy, mu_q, target, refs,
                                  state_cons, control_cons, tolerance=tolerance)
        radius = rad.radius if rad.ok and rad.radius is not None else 0.0
    new = BrtNode(mu=mu_q, sigma=chosen.sigma0, radius=radius, parent=i_k)
    idx = tree.add_node(new, BrtEdge(len(tree.nodes), i_k, chosen.policy))
    if not verify_edge(scene, tree, idx):
        # revert: soundness audit failed (treated as an infeasible iteration)
        tree.nodes.pop()
        tree.edges.pop()
        tree.nodes[i_k].children.pop()
        entry["status"] = "audit_failed"
        return entry
    entry["status"] = "accepted"
    entry["radius"] = radius
    entry["new_index"] = idx
    return entry


def build_ball_tree(scene: Scene, kind: BuilderKind, n_iter: int, seed: int,
                    tolerance=None) -> BrtTree:
    """Algorithm-1 builder (MAX-COV-BALL, MAXCOVAR, or RANDCOVAR nodes)."""
    if kind.is_ellipsoid_family:
        raise ValueError("use build_ell_tree for the ellipsoid family")
    rng = tree_rng(seed)
    tree = _ball_root(scene, kind, seed)
    for _ in range(n_iter):
        i_k = rand_select_node(tree, rng)
        mu_q = rand_mean_around(tree.nodes[i_k].mu, scene.r_sample, scene, rng)
        if mu_q is None:
            tree.log.append({"status": "sampling_exhausted", "node": i_k})
            continue
        tree.log.append(_ball_iteration(scene, tree, i_k, mu_q, kind, rng, tolerance))
    return tree


def build_paired_ball_trees(scene: Scene, n_iter: int, seed: int,
                            baseline: BuilderKind = BuilderKind.MAX_COVAR,
                            tolerance=None) -> tuple:
    """MAX-COV-BALL tree plus a baseline tree grown from the same sampled
    (node, query mean) stream; baseline node sets are subsets by construction."""
    rng = tree_rng(seed)
    ours = _ball_root(scene, BuilderKind.MAX_COV_BALL, seed)
    base = _ball_root(scene, baseline, seed)
    mirror = {0: 0}  # ours index -> baseline index
    for _ in range(n_iter):
        i_k = rand_select_node(ours, rng)
        mu_q = rand_mean_around(ours.nodes[i_k].mu, scene.r_sample, scene, rng)
        if mu_q is None:
            ours.log.append({"status": "sampling_exhausted", "node": i_k})
            continue
        entry = _ball_iteration(scene, ours, i_k, mu_q, BuilderKind.MAX_COV_BALL, rng,
                                tolerance)
        ours.log.append(entry)
        if i_k in mirror:
            b_entry = _ball_iteration(scene, base, mirror[i_k], mu_q, baseline, rng,
                                      tolerance)
            base.log.append(b_entry)
            if entry.get("status") == "accepted" and b_entry.get("status") == "accepted":
                mirror[entry["new_index"]] = b_entry["new_index"]
                _enforce_dominated(ours.nodes[entry["new_index"]],
                                   base.nodes[b_entry["new_index"]])
    return ours, base


def _enforce_dominated(ours_node: BrtNode, base_node: BrtNode) -> None:
    """Clip solver noise so the baseline node set is dominated bit-for-bit.

    The ordering lambda_min(Sigma_base) <= lambda_min(Sigma_ours) holds
    mathematically (the baseline's feasible set is a restriction); shrinking
    the baseline covariance preserves its certificate (all constraints are
    monotone in Sigma), so a noise-scale clip is sound.
    """
    lo = sym_eig_extremes(ours_node.sigma)[0]
    lb = sym_eig_extremes(base_node.sigma)[0]
    if lb > lo > 0.0:
        base_node.sigma = base_node.sigma * (lo / lb)
    if base_node.sigma_ell is not None and ours_node.sigma_ell is not None:
        lo = sym_eig_extremes(ours_node.sigma_ell)[0]
        lb = sym_eig_extremes(base_node.sigma_ell)[0]
        if lb > lo > 0.0:
            base_node.sigma_ell = base_node.sigma_ell * (lo / lb)
    if base_node.radius > ours_node.radius:
        base_node.radius = ours_node.radius


# ---------------------------------------------------------------------------
# Algorithm 2 (ellipsoid family)
# ---------------------------------------------------------------------------

def _ell_root(scene: Scene, kind: BuilderKind, seed: int) -> BrtTree:
    tree = BrtTree(kind, seed, scene.scene_hash, scene.eps_sets)
    tree.add_node(BrtNode(mu=scene.goal_center.copy(), sigma=_root_sigma(scene),
                          sigma_ell=_root_sigma(scene), shape=scene.goal_shape.copy(),
                          radius=scene.goal_radius))
    return tree


def _ell_iteration(scene: Scene, tree: BrtTree, i_k: int, mu_q: np.ndarray,
                   kind: BuilderKind, tolerance=None, pure_tree: BrtTree | None = None,
                   pure_i_k: int | None = None) -> tuple:
    """One Algorithm-2 expansion attempt; optionally mirrors the node into a
    pure MAXELLIPSOID tree when the same solves certify it."""
    node = tree.nodes[i_k]
    state_cons = edge_state_constraints(scene, mu_q)
    control_cons = scene.control_constraints()
    refs = scene.refs_ell
    entry = {"node": i_k, "mu_q": mu_q.tolist(), "kind": kind.value}
    cap_ell = sym_eig_extremes(node.sigma_ell)[0]
    cap_full = sym_eig_extremes(node.sigma)[0]
    if kind == BuilderKind.MAX_ELLIPSOID_FIXED_SIGMA:
        cap_ell = cap_full = sym_eig_extremes(_root_sigma(scene))[0]
    ell = maxellipsoid_baseline(scene.system, mu_q, scene.sigma_query, node.mu, cap_ell,
                                node.shape, scene.horizon, refs, state_cons, control_cons,
                                tolerance=tolerance)
    used_fallback = False
    if not ell.ok and kind == BuilderKind.MAX_ELL_BALL and cap_full > cap_ell:
        ell = maxellipsoid_baseline(scene.system, mu_q, scene.sigma_query, node.mu,
                                    cap_full, node.shape, scene.horizon, refs,
                                    state_cons, control_cons, tolerance=tolerance)
        used_fallback = True
    if not ell.ok:
        entry["status"] = "ellipsoid_infeasible"
        return entry, None
    p0 = ell.shape0
    entry["det_p0"] = float(np.linalg.det(p0))
    if kind == BuilderKind.MAX_ELLIPSOID_FIXED_SIGMA:
        new = BrtNode(mu=mu_q, sigma=_root_sigma(scene), sigma_ell=_root_sigma(scene),
                      shape=p0, radius=0.0, parent=i_k)
        idx = tree.add_node(new, BrtEdge(len(tree.nodes), i_k, ell.policy))
        entry["status"] = "accepted"
        entry["new_index"] = idx
        return entry, None
    cov_ell = maxcovarell_baseline(scene.system, mu_q, p0, node.mu, cap_ell, node.shape,
                                   scene.horizon, refs, state_cons, control_cons,
                                   tolerance=tolerance)
    if kind == BuilderKind.MAX_ELLIPSOID:
        if not cov_ell.ok:
            entry["status"] = "covarell_infeasible"
            return entry, None
        new = BrtNode(mu=mu_q, sigma=cov_ell.sigma0, sigma_ell=cov_ell.sigma0, shape=p0,
                      radius=0.0, parent=i_k)
        idx = tree.add_node(new, BrtEdge(len(tree.nodes), i_k, cov_ell.policy))
        if not verify_edge(scene, tree, idx):
            tree.nodes.pop()
            tree.edges.pop()
            tree.nodes[i_k].children.pop()
            entry["status"] = "audit_failed"
            return entry, None
        entry["status"] = "accepted"
        entry["new_index"] = idx
        return entry, None
    # MAX_ELL_BALL: two candidate covariances against the full node set
    target = tree.target_for(i_k)
    ub = max_ell_ball_ub(scene.system, mu_q, p0, target, scene.horizon, refs,
                         state_cons, control_cons, tolerance=tolerance) \
        if target.radius > 0.0 else EdgeResult(Status.INFEASIBLE)
    mc = maxcovarell_baseline(scene.system, mu_q, p0, node.mu, cap_full, node.shape,
                              scene.horizon, refs, state_cons, control_cons,
                              tolerance=tolerance)
    entry["lambda_ub"] = ub.lambda_min_sigma0() if ub.ok else None
    entry["lambda_mc"] = mc.lambda_min_sigma0() if mc.ok else None
    chosen = None
    if mc.ok:
        chosen = mc
    if ub.ok and (chosen is None or ub.lambda_min_sigma0() >= chosen.lambda_min_sigma0()):
        chosen = ub
    if chosen is None:
        entry["status"] = "infeasible"
        return entry, None
    entry["chosen"] = "ub" if chosen is ub else "mc"
    rad = max_ell_ball_radius(scene.system, chosen.policy, mu_q, p0, target, refs,
                              state_cons, control_cons, tolerance=tolerance)
    radius = rad.radius if rad.ok and rad.radius is not None else 0.0
    sigma_ell = cov_ell.sigma0 if cov_ell.ok else chosen.sigma0
    # node invariant: sigma_ell <= sigma in lambda_min order (clip solver noise)
    lo = sym_eig_extremes(chosen.sigma0)[0]
    lb = sym_eig_extremes(sigma_ell)[0]
    if lb > lo > 0.0:
        sigma_ell = sigma_ell * (lo / lb)
    witness = rad.s_witness if rad.s_witness is not None else chosen.s_witness
    new = BrtNode(mu=mu_q, sigma=chosen.sigma0, sigma_ell=sigma_ell, shape=p0,
                  radius=radius, parent=i_k)
    idx = tree.add_node(new, BrtEdge(len(tree.nodes), i_k, chosen.policy,
                                     s_witness=witness))
    if not verify_edge(scene, tree, idx):
        tree.nodes.pop()
        tree.edges.pop()
        tree.nodes[i_k].children.pop()
        entry["status"] = "audit_failed"
        return entry, None
    entry["status"] = "accepted"
    entry["radius"] = radius
    entry["new_index"] = idx
    # mirror into the pure MAXELLIPSOID tree: same ellipsoid solve applies when
    # the ELL-cap call succeeded without the fallback and MAXCOVARELL was feasible
    pure_entry = None
    if pure_tree is not None and pure_i_k is not None and not used_fallback and cov_ell.ok:
        pure_new = BrtNode(mu=mu_q, sigma=sigma_ell, sigma_ell=sigma_ell,
                           shape=p0, radius=0.0, parent=pure_i_k)
        pure_idx = pure_tree.add_node(
            pure_new, BrtEdge(len(pure_tree.nodes), pure_i_k, cov_ell.policy))
        if not verify_edge(scene, pure_tree, pure_idx):
            pure_tree.nodes.pop()
            pure_tree.edges.pop()
            pure_tree.nodes[pure_i_k].children.pop()
        else:
            pure_entry = {"status": "accepted", "new_index": pure_idx}
    return entry, pure_entry


def build_ell_tree(scene: Scene, kind: BuilderKind, n_iter: int, seed: int,
                   tolerance=None) -> BrtTree:
    """Algorithm-2 builder (MAX-ELL-BALL or the MAXELLIPSOID baselines)."""
    if not kind.is_ellipsoid_family:
        raise ValueError("use build_ball_tree for the ball family")
    rng = tree_rng(seed)
    tree = _ell_root(scene, kind, seed)
    for _ in range(n_iter):
        i_k = rand_select_node(tree, rng)
        mu_q = rand_mean_around(tree.nodes[i_k].mu, scene.r_sample, scene, rng)
        if mu_q is None:
            tree.log.append({"status": "sampling_exhausted", "node": i_k})
            continue
        entry, _ = _ell_iteration(scene, tree, i_k, mu_q, kind, tolerance)
        tree.log.append(entry)
    return tree


def build_paired_ell_trees(scene: Scene, n_iter: int, seed: int, tolerance=None) -> tuple:
    """MAX-ELL-BALL tree plus the pure MAXELLIPSOID tree grown from the same
    sample stream and the shared ellipsoid solves (identical shape matrices)."""
    rng = tree_rng(seed)
    ours = _ell_root(scene, BuilderKind.MAX_ELL_BALL, seed)
    pure = _ell_root(scene, BuilderKind.MAX_ELLIPSOID, seed)
    mirror = {0: 0}
    for _ in range(n_iter):
        i_k = rand_select_node(ours, rng)
        mu_q = rand_mean_around(ours.nodes[i_k].mu, scene.r_sample, scene, rng)
        if mu_q is None:
            ours.log.append({"status": "sampling_exhausted", "node": i_k})
            continue
        pure_i = mirror.get(i_k)
        entry, pure_entry = _ell_iteration(scene, ours, i_k, mu_q,
                                           BuilderKind.MAX_ELL_BALL, tolerance,
                                           pure_tree=pure if pure_i is not None else None,
                                           pure_i_k=pure_i)
        ours.log.append(entry)
        if pure_entry is not None and entry.get("status") == "accepted":
            mirror[entry["new_index"]] = pure_entry["new_index"]
    return ours, pure


def build_tree(scene: Scene, kind: BuilderKind, n_iter: int, seed: int,
               tolerance=None) -> BrtTree:
    kind = BuilderKind(kind)
    if kind.is_ellipsoid_family:
        return build_ell_tree(scene, kind, n_iter, seed, tolerance)
    return build_ball_tree(scene, kind, n_iter, seed, tolerance)


# ---------------------------------------------------------------------------
# query connection
# ---------------------------------------------------------------------------

def connect_query(tree: BrtTree, belief: bel.GaussianBelief, mode: str = "membership",
                  scene: Scene | None = None, max_steer_attempts: int = 8):
    """Path of edge policies from a containing node to the root, or None.

    Membership mode scans nodes in insertion order; steer mode additionally
    attempts one fresh steering edge to each node, nearest mean first.
    """
    for idx in range(len(tree.nodes)):
        if bel.contains(tree.node_set(idx), belief):
            return [tree.edges[e] for e in tree.path_to_root(idx)]
    if mode != "steer":
        return None
    if scene is None:
        raise ValueError("steer mode needs the scene")
    order = sorted(range(len(tree.nodes)),
                   key=lambda i: float(np.linalg.norm(tree.nodes[i].mu - belief.mean)))
    state_cons = edge_state_constraints(scene, belief.mean)
    control_cons = scene.control_constraints()
    refs = scene.refs_ell if tree.kind.is_ellipsoid_family else scene.refs_ball
    for idx in order[:max_steer_attempts]:
        target = tree.target_for(idx)
        if target.radius <= 0.0:
            continue
        if tree.kind.is_ellipsoid_family:
            edge = max_ell_ball_ub(scene.system, belief.mean, np.zeros((scene.n, scene.n)),
                                   target, scene.horizon, refs, state_cons, control_cons,
                                   sigma0_fixed=belief.cov)
        else:
            edge = max_cov_ball_ub(scene.system, belief.mean, target, scene.horizon, refs,
                                   state_cons, control_cons, sigma0_fixed=belief.cov)
        if edge.ok:
            fresh = BrtEdge(-1, idx, edge.policy, s_witness=edge.s_witness)
            return [fresh] + [tree.edges[e] for e in tree.path_to_root(idx)]
    return None


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _mat(m) -> list | None:
    return None if m is None else np.asarray(m, dtype=float).reshape(-1).tolist()


def tree_to_json(tree: BrtTree) -> dict:
    nodes = []
    for node in tree.nodes:
        nodes.append({
            "mu": node.mu.tolist(),
            "sigma": _mat(node.sigma),
            "sigma_ell": _mat(node.sigma_ell),
            "shape": _mat(node.shape),
            "radius": node.radius,
            "parent": node.parent,
            "edge": node.edge,
            "children": list(node.children),
            "depth": node.depth,
        })
    edges = []
    for edge in tree.edges:
        edges.append({
            "child": edge.child,
            "parent": edge.parent,
            "xbar": edge.policy.xbar.reshape(-1).tolist(),
            "ubar": edge.policy.ubar.reshape(-1).tolist(),
            "gains": edge.policy.gains.reshape(-1).tolist(),
            "horizon": edge.policy.horizon,
            "s_witness": None if edge.s_witness is None else edge.s_witness.tolist(),
        })
    payload = {
        "version": TREE_FORMAT_VERSION,
        "builder": tree.kind.value,
        "seed": tree.seed,
        "scene_hash": tree.scene_hash,
        "epsilon": tree.epsilon,
        "nodes": nodes,
        "edges": edges,
    }
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    payload["checksum"] = digest
    return payload


def save_tree(tree: BrtTree, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(tree_to_json(tree), fh, sort_keys=True, separators=(",", ":"))


class TreeFormatError(ValueError):
    pass


def tree_from_json(payload: dict, scene: Scene | None = None) -> BrtTree:
    if not isinstance(payload, dict) or "version" not in payload:
        raise TreeFormatError("malformed tree file")
    if payload["version"] != TREE_FORMAT_VERSION:
        raise TreeFormatError(
            f"unsupported tree format version {payload['version']!r}")
    body = {k: v for k, v in payload.items() if k != "checksum"}
    digest = hashlib.sha256(
        json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    if digest != payload.get("checksum"):
        raise TreeFormatError("tree file checksum mismatch")
    tree = BrtTree(BuilderKind(payload["builder"]), payload["seed"],
                   payload["scene_hash"], payload["epsilon"])
    n = len(payload["nodes"][0]["mu"])

    def unmat(values):
        return None if values is None else np.asarray(values, dtype=float).reshape(n, n)

    for rec in payload["nodes"]:
        tree.nodes.append(BrtNode(
            mu=np.asarray(rec["mu"], dtype=float),
            sigma=unmat(rec["sigma"]),
            sigma_ell=unmat(rec["sigma_ell"]),
            shape=unmat(rec["shape"]),
            radius=rec["radius"],
            parent=rec["parent"],
            edge=rec["edge"],
            children=list(rec["children"]),
            depth=rec["depth"],
        ))
    for rec in payload["edges"]:
        horizon = rec["horizon"]
        m = len(rec["ubar"]) // horizon
        policy = ControlPolicy(
            np.asarray(rec["xbar"], dtype=float).reshape(horizon + 1, n),
            np.asarray(rec["ubar"], dtype=float).reshape(horizon, m),
            np.asarray(rec["gains"], dtype=float).reshape(horizon, m, n),
        )
        tree.edges.append(BrtEdge(rec["child"], rec["parent"], policy,
                                  None if rec["s_witness"] is None
                                  else np.asarray(rec["s_witness"], dtype=float)))
    if scene is not None:
        if scene.scene_hash != tree.scene_hash:
            raise TreeFormatError("tree was built on a different scene")
        for idx in range(1, len(tree.nodes)):
            if not verify_edge(scene, tree, idx):
                raise TreeFormatError(f"edge re-verification failed at node {idx}")
    return tree


def load_tree(path: str, scene: Scene | None = None) -> BrtTree:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TreeFormatError(f"tree file is not valid JSON: {exc}") from exc
    return tree_from_json(payload, scene)
