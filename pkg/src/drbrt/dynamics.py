"""Linear Gaussian dynamics, closed-loop moment propagation, chance margins,
and Monte Carlo validation.

Mean/covariance recurrences follow the closed-loop form: deviations from a
policy's reference trajectory propagate through A + B K_k, the reference
itself through A x + B u.  Rollouts use a counter-based generator keyed by
(seed, block) so results are independent of how samples are partitioned.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import beliefs as bel
from .numerics import normal_inverse_cdf, psd_project, psd_sqrt, sym_eig_extremes

_MC_BLOCK = 4096


class ConstraintDomain(str, enum.Enum):
    STATE = "state"
    CONTROL = "control"


@dataclass(frozen=True)
class LinearSystem:
    """x_{t+1} = A x_t + B u_t + D w_t with w_t ~ N(0, I); A nonsingular."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        D = np.asarray(self.D, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if abs(np.linalg.det(A)) <= 1e-12:
            raise ValueError("A must be nonsingular")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError("B row dimension must match A")
        if D.ndim != 2 or D.shape[0] != A.shape[0]:
            raise ValueError("D row dimension must match A")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.D.shape[1]

    @property
    def noise_cov(self) -> np.ndarray:
        return self.D @ self.D.T


@dataclass(frozen=True)
class ControlPolicy:
    """Reference trajectory plus feedback gains: u_k = K_k (x_k - xbar_k) + ubar_k."""

    xbar: np.ndarray  # (N+1, n)
    ubar: np.ndarray  # (N, m)
    gains: np.ndarray  # (N, m, n)

    def __post_init__(self):
        xbar = np.asarray(self.xbar, dtype=float)
        ubar = np.asarray(self.ubar, dtype=float)
        gains = np.asarray(self.gains, dtype=float)
        if xbar.ndim != 2 or ubar.ndim != 2 or gains.ndim != 3:
            raise ValueError("policy arrays have wrong rank")
        if xbar.shape[0] != ubar.shape[0] + 1 or gains.shape[0] != ubar.shape[0]:
            raise ValueError("policy horizon mismatch")
        object.__setattr__(self, "xbar", xbar)
        object.__setattr__(self, "ubar", ubar)
        object.__setattr__(self, "gains", gains)

    @property
    def horizon(self) -> int:
        return self.ubar.shape[0]

    @staticmethod
    def from_initial_state(system: LinearSystem, x0: np.ndarray, ubar: np.ndarray,
                           gains: np.ndarray) -> "ControlPolicy":
        """Build the reference chain xbar_{k+1} = A xbar_k + B ubar_k from x0."""
        ubar = np.asarray(ubar, dtype=float).reshape(-1, system.m)
        gains = np.asarray(gains, dtype=float).reshape(-1, system.m, system.n)
        xbar = np.empty((ubar.shape[0] + 1, system.n))
        xbar[0] = np.asarray(x0, dtype=float).reshape(-1)
        for k in range(ubar.shape[0]):
            xbar[k + 1] = system.A @ xbar[k] + system.B @ ubar[k]
        return ControlPolicy(xbar, ubar, gains)

    def check_consistency(self, system: LinearSystem, tol: float = 1e-8) -> None:
        for k in range(self.horizon):
            resid = self.xbar[k + 1] - system.A @ self.xbar[k] - system.B @ self.ubar[k]
            if np.abs(resid).max() > tol * max(1.0, np.abs(self.xbar).max()):
                raise ValueError(f"reference trajectory inconsistent at step {k}")


@dataclass(frozen=True)
class HalfspaceChance:
    """Chance constraint P(a' y <= b) >= 1 - epsilon on the state or the control."""

    a: np.ndarray
    b: float
    epsilon: float
    domain: ConstraintDomain = ConstraintDomain.STATE

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        if np.linalg.norm(a) == 0.0:
            raise ValueError("halfspace normal must be nonzero")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "domain", ConstraintDomain(self.domain))

    @property
    def quantile(self) -> float:
        return normal_inverse_cdf(1.0 - self.epsilon)


@dataclass
class ClosedLoopTrajectory:
    """Per-step first/second moments and the decoupled uncertainty shapes."""

    system: LinearSystem
    policy: ControlPolicy
    mu: np.ndarray        # (N+1, n) ambiguity-set centers (reference-aligned)
    sigma: np.ndarray     # (N+1, n, n) covariance
    r_shape: np.ndarray   # (N+1, n, n) mean-uncertainty shape (closed loop)
    p_shape: np.ndarray   # (N+1, n, n) witness-ellipsoid shape (open loop)
    sigma_dd: np.ndarray  # (N+1, n, n) accumulated process noise
    _acl_cache: dict = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> int:
        return self.policy.horizon

    def acl(self, j: int, k: int) -> np.ndarray:
        """Closed-loop transition product over steps j..k (identity when j > k)."""
        return closed_loop_matrix(self.policy, self.system, j, k, self._acl_cache)


def closed_loop_matrix(policy: ControlPolicy, system: LinearSystem, j: int, k: int,
                       cache: dict | None = None) -> np.ndarray:
    """Product of (A + B K_t) for t = j..k, later factors on the left."""
    n = system.n
    if j > k:
        return np.eye(n)
    if not (0 <= j <= k <= policy.horizon - 1):
        raise IndexError(f"closed-loop indices ({j}, {k}) out of range")
    if cache is not None and (j, k) in cache:
        return cache[(j, k)]
    out = np.eye(n)
    for t in range(j, k + 1):
        out = (system.A + system.B @ policy.gains[t]) @ out
    if cache is not None:
        cache[(j, k)] = out
    return out


def propagate(system: LinearSystem, policy: ControlPolicy, mu0: np.ndarray,
              sigma0: np.ndarray, r0: np.ndarray | None = None,
              p0: np.ndarray | None = None) -> ClosedLoopTrajectory:
    """Propagate the set moments: mu open loop, Sigma/R closed loop, P through A.

    mu0 is the ambiguity-set center and must start on the policy reference.
    """
    n, N = system.n, policy.horizon
    mu0 = np.asarray(mu0, dtype=float).reshape(-1)
    if mu0.shape[0] != n:
        raise ValueError("mu0 dimension mismatch")
    sigma0 = psd_project(sigma0, rel_tol=1e-8)
    r0 = np.zeros((n, n)) if r0 is None else psd_project(r0, rel_tol=1e-8)
    p0 = np.zeros((n, n)) if p0 is None else psd_project(p0, rel_tol=1e-8)
    mu = np.empty((N + 1, n))
    sigma = np.empty((N + 1, n, n))
    r_shape = np.empty((N + 1, n, n))
    p_shape = np.empty((N + 1, n, n))
    sigma_dd = np.empty((N + 1, n, n))
    mu[0], sigma[0], r_shape[0], p_shape[0] = mu0, sigma0, r0, p0
    sigma_dd[0] = np.zeros((n, n))
    ddt = system.noise_cov
    for k in range(N):
        a_cl = system.A + system.B @ policy.gains[k]
        mu[k + 1] = system.A @ mu[k] + system.B @ policy.ubar[k]
        sigma[k + 1] = a_cl @ sigma[k] @ a_cl.T + ddt
        r_shape[k + 1] = a_cl @ r_shape[k] @ a_cl.T
        p_shape[k + 1] = system.A @ p_shape[k] @ system.A.T
        sigma_dd[k + 1] = a_cl @ sigma_dd[k] @ a_cl.T + ddt
    return ClosedLoopTrajectory(system, policy, mu, sigma, r_shape, p_shape, sigma_dd)


def propagate_belief(system: LinearSystem, policy: ControlPolicy,
                     belief: bel.GaussianBelief) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean/covariance chains for an arbitrary belief under the policy.

    The mean feeds back on its deviation from the reference:
    mu_{k+1} = A mu_k + B(K_k (mu_k - xbar_k) + ubar_k).
    """
    n, N = system.n, policy.horizon
    mu = np.empty((N + 1, n))
    sigma = np.empty((N + 1, n, n))
    mu[0], sigma[0] = belief.mean, belief.cov
    ddt = system.noise_cov
    for k in range(N):
        a_cl = system.A + system.B @ policy.gains[k]
        mu[k + 1] = (system.A @ mu[k] + system.B @ (policy.gains[k] @ (mu[k] - policy.xbar[k])
                                                    + policy.ubar[k]))
        sigma[k + 1] = a_cl @ sigma[k] @ a_cl.T + ddt
    return mu, sigma


def _sqrt_quad(a: np.ndarray, m: np.ndarray | None) -> float:
    if m is None:
        return 0.0
    return math.sqrt(max(float(a @ m @ a), 0.0))


def chance_margin(constraint: HalfspaceChance, mu: np.ndarray,
                  sigma: np.ndarray | None = None, r_shape: np.ndarray | None = None,
                  p_shape: np.ndarray | None = None, ubar: np.ndarray | None = None,
                  gain: np.ndarray | None = None, xbar: np.ndarray | None = None) -> float:
    """Signed slack of a chance constraint; negative means violated.

    State domain:   b - [a'mu + q sqrt(a'Sigma a) + sqrt(a'R a) + sqrt(a'P a)]
    Control domain: the same with a' replaced by a'K and the base term
    a'(ubar + K (mu - xbar)); absent uncertainty terms are omitted.
    """
    a = constraint.a
    q = constraint.quantile
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if constraint.domain == ConstraintDomain.CONTROL:
        if gain is None or ubar is None:
            raise ValueError("control-domain margin needs the policy step data")
        offset = mu - xbar if xbar is not None else np.zeros_like(mu)
        base = float(a @ (ubar + gain @ offset))
        a = gain.T @ a
        lhs = base
    else:
        lhs = float(a @ mu)
    lhs += q * _sqrt_quad(a, sigma)
    lhs += _sqrt_quad(a, r_shape)
    lhs += _sqrt_quad(a, p_shape)
    return constraint.b - lhs


# ---------------------------------------------------------------------------
# goal regions and Monte Carlo rollout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoalRegion:
    """Point region in state space: a ball, or ellipsoid (+) ball Minkowski sum."""

    center: np.ndarray
    radius: float
    shape: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        if self.shape is not None:
            object.__setattr__(self, "shape", psd_project(self.shape, rel_tol=1e-8))

    @staticmethod
    def ball(center: np.ndarray, radius: float) -> "GoalRegion":
        return GoalRegion(center, float(radius))

    @staticmethod
    def ellipsoid_ball(center: np.ndarray, shape: np.ndarray, radius: float) -> "GoalRegion":
        return GoalRegion(center, float(radius), shape)

    def contains_points(self, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.shape is None:
            return np.linalg.norm(pts - self.center, axis=1) <= self.radius + tol
        dists = _ellipsoid_distances(pts, self.center, self.shape)
        return dists <= self.radius + tol


def _ellipsoid_distances(pts: np.ndarray, center: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Vectorized point-to-ellipsoid Euclidean distances (dual bisection)."""
    w, v = np.linalg.eigh(shape)
    w = np.clip(w, 0.0, None)
    z = (pts - center) @ v
    active = w > 1e-14 * max(float(w[-1]), 1.0)
    wa = w[active]
    za = z[:, active]
    z_null_sq = np.sum(z[:, ~active] ** 2, axis=1)
    inside = np.sum(np.where(wa > 0, za ** 2 / wa, 0.0), axis=1) <= 1.0
    out = np.sqrt(np.where(inside, z_null_sq, 0.0))
    todo = ~inside
    if not todo.any():
        return out
    zt = za[todo]
    lo = np.zeros(zt.shape[0])
    hi = np.ones(zt.shape[0])

    def resid(nu):
        s = wa / (wa + nu[:, None])
        return np.sum(zt ** 2 * s ** 2 / wa, axis=1) - 1.0

    for _ in range(80):
        grow = resid(hi) > 0.0
        if not grow.any():
            break
        hi[grow] *= 2.0
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        pos = resid(mid) > 0.0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    nu = 0.5 * (lo + hi)
    proj = zt * (wa / (wa + nu[:, None]))
    d_act = np.sum((zt - proj) ** 2, axis=1)
    out[todo] = np.sqrt(d_act + z_null_sq[todo])
    return out


@dataclass
class RolloutStats:
    """Empirical per-step violation frequencies and terminal goal frequency."""

    goal_frequency: float
    segment_frequencies: list  # per segment: (n_constraints, n_steps) arrays
    constraints: list          # per segment: the constraint lists
    n_samples: int
    seed: int

    def max_violation(self) -> float:
        worst = 0.0
        for freq in self.segment_frequencies:
            if freq.size:
                worst = max(worst, float(freq.max()))
        return worst

    def to_json(self) -> dict:
        return {
            "goal_frequency": self.goal_frequency,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "segments": [
                {
                    "violation_frequency": freq.tolist(),
                    "constraints": [
                        {"a": c.a.tolist(), "b": c.b, "epsilon": c.epsilon,
                         "domain": c.domain.value}
                        for c in cons
                    ],
                }
                for freq, cons in zip(self.segment_frequencies, self.constraints)
            ],
        }


def _block_rng(seed: int, block: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(block)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_gaussian(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray,
                    count: int) -> np.ndarray:
    """Gaussian samples via Cholesky, eigendecomposition fallback for singular cov."""
    n = mean.shape[0]
    z = rng.standard_normal((count, n))
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        factor = psd_sqrt(cov)
    return mean + z @ factor.T


def monte_carlo_rollout(system: LinearSystem, policy, belief: bel.GaussianBelief,
                        constraints, goal, n_samples: int, seed: int) -> RolloutStats:
    """Roll sampled trajectories through one policy or a list of policy segments.

    Violation frequencies are tracked per segment, per constraint, per step
    (state constraints over steps 0..N, control over 0..N-1); the goal region
    is checked at the final state.  Deterministic given the seed and
    independent of internal blocking.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    segments = list(policy) if isinstance(policy, (list, tuple)) else [policy]
    if constraints and isinstance(constraints[0], HalfspaceChance):
        constraint_lists = [list(constraints)] * len(segments)
    else:
        constraint_lists = [list(c) for c in constraints] if constraints else [[]] * len(segments)
    if len(constraint_lists) != len(segments):
        raise ValueError("per-segment constraint lists must match the segments")
    if isinstance(goal, tuple):
        goal = GoalRegion.ball(goal[0], goal[1]) if len(goal) == 2 else \
            GoalRegion.ellipsoid_ball(goal[0], goal[1], goal[2])

    counts = [np.zeros((len(cons), seg.horizon + 1)) for seg, cons in
              zip(segments, constraint_lists)]
    goal_hits = 0
    done = 0
    block_idx = 0
    while done < n_samples:
        take = min(_MC_BLOCK, n_samples - done)
        rng = _block_rng(seed, block_idx)
        x = sample_gaussian(rng, belief.mean, belief.cov, take)
        for si, (seg, cons) in enumerate(zip(segments, constraint_lists)):
            for k in range(seg.horizon + 1):
                for ci, c in enumerate(cons):
                    if c.domain == ConstraintDomain.STATE:
                        viol = x @ c.a > c.b + 1e-12
                        counts[si][ci, k] += int(viol.sum())
                if k == seg.horizon:
                    break
                u = (x - seg.xbar[k]) @ seg.gains[k].T + seg.ubar[k]
                for ci, c in enumerate(cons):
                    if c.domain == ConstraintDomain.CONTROL:
                        viol = u @ c.a > c.b + 1e-12
                        counts[si][ci, k] += int(viol.sum())
                w = rng.standard_normal((take, system.n_w))
                x = x @ system.A.T + u @ system.B.T + w @ system.D.T
        goal_hits += int(goal.contains_points(x).sum())
        done += take
        block_idx += 1
    freqs = [c / n_samples for c in counts]
    return RolloutStats(goal_hits / n_samples, freqs, constraint_lists, n_samples, seed)


# ---------------------------------------------------------------------------
# ball-invariance probes (Lemma level validation)
# ---------------------------------------------------------------------------

def _probe_directions(n: int, count: int) -> np.ndarray:
    dirs = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        dirs.append(e.copy())
        dirs.append(-e)
    rng = _block_rng(0xB411, 0)
    while len(dirs) < count:
        v = rng.standard_normal(n)
        nv = np.linalg.norm(v)
        if nv > 1e-12:
            dirs.append(v / nv)
    return np.asarray(dirs[:count])


def verify_ball_invariance(system: LinearSystem, policy: ControlPolicy,
                           source: bel.BallSet, target: bel.BallSet,
                           constraints, cov_floor: float, n_probes: int = 100,
                           tol: float = 1e-9) -> bool:
    """Deterministic probe check of the ball-invariance property.

    Probes cover the boundary and interior of the source set subject to
    Sigma_0 >= cov_floor * I; each probe is propagated analytically, must
    satisfy every chance margin, and must land inside the target set.
    """
    if cov_floor < 0:
        raise ValueError("covariance floor must be nonnegative")
    n = system.n
    q = source.quantile
    budget = source.radius - q * math.sqrt(cov_floor)
    if budget < -tol:
        return True  # no beliefs satisfy the floor: vacuous
    budget = max(budget, 0.0)
    n_dirs = max(2, n_probes // 9)
    dirs = _probe_directions(n, n_dirs)
    # prepend the analytically binding directions for the terminal check:
    # the top singular direction of the closed-loop product, and the direction
    # that stretches the terminal gap away from the target center
    acl = closed_loop_matrix(policy, system, 0, policy.horizon - 1)
    _, svals, vt = np.linalg.svd(acl)
    smart = [vt[0]]
    ref_traj = propagate(system, policy, policy.xbar[0], np.zeros((n, n)))
    w = ref_traj.mu[-1] - target.center
    pull = acl.T @ w
    if np.linalg.norm(pull) > 1e-12:
        smart.append(pull / np.linalg.norm(pull))
    dirs = np.vstack([np.asarray(smart), dirs])
    fractions = (1.0, 0.5, 0.0)
    shares = (0.0, 0.5, 1.0)
    probes = []
    for di, d in enumerate(dirs):
        for f in fractions:
            for c in shares:
                alpha = f * (1.0 - c) * budget
                s_max = math.sqrt(cov_floor) + f * c * budget / q if q > 0 else 0.0
                mu0 = source.center + alpha * d
                if di % 2 == 0:
                    cov0 = s_max ** 2 * np.eye(n)
                else:
                    cov0 = cov_floor * np.eye(n) + (s_max ** 2 - cov_floor) * np.outer(d, d)
                probes.append(bel.GaussianBelief(mu0, cov0))
    for belief in probes[:n_probes]:
        mu, sigma = propagate_belief(system, policy, belief)
        for k in range(policy.horizon + 1):
            for c in constraints:
                if c.domain == ConstraintDomain.STATE:
                    slack = chance_margin(c, mu[k], sigma[k])
                elif k < policy.horizon:
                    slack = chance_margin(c, mu[k], sigma[k], ubar=policy.ubar[k],
                                          gain=policy.gains[k], xbar=policy.xbar[k])
                else:
                    continue
                if slack < -tol:
                    return False
        if not bel.contains(target, bel.GaussianBelief(mu[-1], sigma[-1]), tol=tol):
            return False
    return True
