"""Edge-controller synthesis: semidefinite covariance-steering programs.

Three program families share one machinery core (mean chain, covariance chain
through the U = K Sigma substitution and the Schur slack Y >= K Sigma K',
linearized chance constraints):

* ball edges: maximize lambda_min(Sigma_0) toward a ball target (upper-bound
  program, iterated terminal linearization), then maximize lambda_min(R_0)
  for the fixed recovered policy (the radius program);
* ellipsoid-ball edges: the same pair with a constant witness-ellipsoid chain
  P_k = A^k P_0 A^k', a witness point s constrained into the target ellipsoid,
  and the shifted-copy containment condition;
* baselines: MAXCOVAR / MAXCOVARELL (terminal mean equality or containment
  plus a covariance cap), MAXELLIPSOID (log-det ellipsoid maximization over
  the Cholesky factor), and RANDCOVAR (feasibility at a random covariance).

Every returned edge is re-propagated exactly from the recovered gains and
audited against the original (unlinearized) constraints before acceptance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import beliefs as bel
from .conic import (
    AffExpr,
    ConicProgram,
    LAMBDA_MAX_DEFAULT,
    Status,
    SymExpr,
    congruence_map,
    pair_sym_map,
    quad_row,
    svec_of,
    sym_place_scalar,
    sym_place_vector,
    verify_solution,
)
from .dynamics import (
    ConstraintDomain,
    ControlPolicy,
    HalfspaceChance,
    LinearSystem,
    chance_margin,
    propagate,
)
from .numerics import Ellipsoid, ellipsoid_contained, psd_project, psd_sqrt, sym_eig_extremes

AUDIT_SLACK_TOL = 1e-9
ACCEPT_TOL = 1e-6
GAIN_SV_CUTOFF = 1e-9
# Inequalities are tightened inside the solver by 10x the solver tolerance so
# that exact re-evaluation of the recovered solution sits strictly feasible
# despite interior-point residuals; scales with the requested accuracy.
AUDIT_MARGIN_FACTOR = 10.0


def _audit_margin(tolerance):
    from .conic import solver_tolerance

    return AUDIT_MARGIN_FACTOR * (solver_tolerance() if tolerance is None else tolerance)
# Feedback gains below this Frobenius norm are numerical noise from the
# U pinv(Sigma) recovery and are zeroed before re-verification.
GAIN_CLEAN_NORM = 1e-7


# ---------------------------------------------------------------------------
# tangent bounds
# ---------------------------------------------------------------------------

def tangent_overestimate_m1(a: np.ndarray, m_ref: np.ndarray, m: np.ndarray) -> float:
    """Global overestimate of sqrt(a'Ma) from the tangent at the reference."""
    a = np.asarray(a, dtype=float).reshape(-1)
    ref = float(a @ m_ref @ a)
    if ref <= 0.0:
        raise ValueError("degenerate linearization reference (a'M_r a must be positive)")
    return float(a @ m @ a) / (2.0 * math.sqrt(ref)) + math.sqrt(ref) / 2.0


def tangent_underestimate_m2(v1: np.ndarray, v2: np.ndarray, m: np.ndarray) -> float:
    """Global underestimate of v1'M^{-1}v1 - 1 from the tangent at v2."""
    m = np.asarray(m, dtype=float)
    lo, hi = sym_eig_extremes(m)
    if lo <= 1e-14 * max(hi, 1.0):
        raise ValueError("M must be positive definite")
    inv = np.linalg.inv(m)
    v1 = np.asarray(v1, dtype=float).reshape(-1)
    v2 = np.asarray(v2, dtype=float).reshape(-1)
    return float(2.0 * v2 @ inv @ v1 - v2 @ inv @ v2 - 1.0)


# ---------------------------------------------------------------------------
# configuration records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SteeringRefs:
    """Linearization references; PSD matrices, terminal reference positive."""

    sigma_r: np.ndarray
    y_r: np.ndarray
    r_r: np.ndarray
    p_r: np.ndarray
    r_ref: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sigma_r", psd_project(self.sigma_r, rel_tol=1e-8))
        object.__setattr__(self, "y_r", psd_project(self.y_r, rel_tol=1e-8))
        object.__setattr__(self, "r_r", psd_project(self.r_r, rel_tol=1e-8))
        object.__setattr__(self, "p_r", psd_project(self.p_r, rel_tol=1e-8))
        if self.r_ref <= 0:
            raise ValueError("terminal reference must be positive")


@dataclass(frozen=True)
class TargetBall:
    center: np.ndarray
    radius: float
    quantile: float  # Phi^-1(1-eps) or sqrt(chi2^-1(1-eps, n)) per the node flavor

    @staticmethod
    def of(ball: bel.BallSet) -> "TargetBall":
        return TargetBall(ball.center, ball.radius, ball.quantile)


@dataclass(frozen=True)
class TargetEllBall:
    center: np.ndarray
    shape: np.ndarray  # positive definite
    radius: float
    quantile: float

    @staticmethod
    def of(eb: bel.EllBallSet) -> "TargetEllBall":
        return TargetEllBall(eb.center, eb.shape, eb.radius, eb.quantile)


@dataclass
class EdgeResult:
    status: Status
    policy: ControlPolicy | None = None
    sigma0: np.ndarray | None = None
    radius: float | None = None
    shape0: np.ndarray | None = None
    s_witness: np.ndarray | None = None
    terminal_mu: np.ndarray | None = None
    terminal_sigma: np.ndarray | None = None
    terminal_r_shape: np.ndarray | None = None
    terminal_p_shape: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL

    def lambda_min_sigma0(self) -> float:
        if self.sigma0 is None:
            return -np.inf
        return sym_eig_extremes(self.sigma0)[0]


def _solve(prog: ConicProgram, tolerance, backend: str):
    """Solve, retrying once at a looser tolerance on solver breakdown."""
    sol = prog.solve(tolerance, backend)
    if sol.status in (Status.NUMERICAL_FAILURE, Status.ITER_LIMIT):
        from .conic import solver_tolerance

        base = solver_tolerance() if tolerance is None else tolerance
        sol = prog.solve(min(100.0 * base, 1e-5), backend)
    return sol


# ---------------------------------------------------------------------------
# shared program machinery
# ---------------------------------------------------------------------------

class _SteeringCore:
    """Mean/covariance chain variables and chance constraints of Problem-5 type."""

    def __init__(self, system: LinearSystem, mu_q: np.ndarray, horizon: int,
                 refs: SteeringRefs, state_cons, control_cons,
                 p_chain: list[np.ndarray] | None = None, name: str = "steer",
                 margin: float = 1e-7):
        n, m, N = system.n, system.m, horizon
        self.system, self.N = system, N
        self.prog = ConicProgram(name)
        prog = self.prog
        self.mu = [prog.add_vector(f"mu{k}", n) for k in range(N + 1)]
        self.ubar = [prog.add_vector(f"u{k}", m) for k in range(N)]
        self.sig = [prog.add_sym(f"S{k}", n) for k in range(N + 1)]
        self.uu = [prog.add_vector(f"U{k}", m * n) for k in range(N)]
        self.yy = [prog.add_sym(f"Y{k}", m) for k in range(N)]

        prog.add_eq(AffExpr.of_var(self.mu[0]) + AffExpr.constant(-np.asarray(mu_q, float)),
                    name="mu_init")
        c_sig = congruence_map(system.A)
        m_pair = pair_sym_map(system.B, system.A)
        c_y = congruence_map(system.B)
        dd = svec_of(system.noise_cov)
        for k in range(N):
            prog.add_eq(AffExpr.of_var(self.mu[k + 1])
                        + AffExpr.of_var(self.mu[k], -system.A)
                        + AffExpr.of_var(self.ubar[k], -system.B), name=f"mean_dyn{k}")
            prog.add_eq(AffExpr.of_var(self.sig[k + 1])
                        + AffExpr.of_var(self.sig[k], -c_sig)
                        + AffExpr.of_var(self.uu[k], -m_pair)
                        + AffExpr.of_var(self.yy[k], -c_y)
                        + AffExpr.constant(-dd), name=f"cov_dyn{k}")
            # [[Sigma_k, U_k'], [U_k, Y_k]] >= 0
            d = n + m
            schur = SymExpr.from_sym_var(self.sig[k], _embed_sym_map(n, d, 0), order=d)
            schur = schur + SymExpr.from_sym_var(self.yy[k], _embed_sym_map(m, d, n), order=d)
            schur = schur + SymExpr(d, {self.uu[k]: _u_block_map(n, m)})
            prog.add_lmi(schur, name=f"schur{k}")
        # chance constraints
        self.state_cons = list(state_cons)
        self.control_cons = list(control_cons)
        for k in range(N + 1):
            for ci, c in enumerate(self.state_cons):
                ref = float(c.a @ refs.sigma_r @ c.a)
                if ref <= 0.0:
                    raise ValueError("degenerate state linearization reference")
                row = c.quantile * quad_row(c.a) / (2.0 * math.sqrt(ref))
                const = c.quantile * math.sqrt(ref) / 2.0 - c.b + margin
                if p_chain is not None:
                    const += math.sqrt(max(float(c.a @ p_chain[k] @ c.a), 0.0))
                expr = AffExpr.of_var(self.mu[k], c.a.reshape(1, -1)) \
                    + AffExpr.of_var(self.sig[k], row.reshape(1, -1)) \
                    + AffExpr.constant([const])
                prog.add_ineq(expr, name=f"state{ci}_k{k}")
        for k in range(N):
            for ci, c in enumerate(self.control_cons):
                ref = float(c.a @ refs.y_r @ c.a)
                if ref <= 0.0:
                    raise ValueError("degenerate control linearization reference")
                row = c.quantile * quad_row(c.a) / (2.0 * math.sqrt(ref))
                const = c.quantile * math.sqrt(ref) / 2.0 - c.b + margin
                expr = AffExpr.of_var(self.ubar[k], c.a.reshape(1, -1)) \
                    + AffExpr.of_var(self.yy[k], row.reshape(1, -1)) \
                    + AffExpr.constant([const])
                prog.add_ineq(expr, name=f"control{ci}_k{k}")

    def fix_sigma0(self, sigma0: np.ndarray):
        self.prog.add_eq(AffExpr.of_var(self.sig[0])
                         + AffExpr.constant(-svec_of(np.asarray(sigma0, float))),
                         name="sigma0_fixed")

    def extract_policy(self, sol, mu_q: np.ndarray) -> tuple[ControlPolicy, np.ndarray]:
        """Recover gains K_k = U_k pinv(Sigma_k) and rebuild the reference chain."""
        n, m, N = self.system.n, self.system.m, self.N
        ubar = np.vstack([sol.value(self.ubar[k]) for k in range(N)])
        gains = np.empty((N, m, n))
        for k in range(N):
            u_k = sol.value(self.uu[k]).reshape(m, n)
            sig_k = sol.value(self.sig[k])
            gains[k] = u_k @ _pinv_psd(sig_k)
            if np.linalg.norm(gains[k]) <= GAIN_CLEAN_NORM:
                gains[k] = np.zeros_like(gains[k])
        policy = ControlPolicy.from_initial_state(self.system, mu_q, ubar, gains)
        return policy, sol.value(self.sig[0])


def _embed_sym_map(n_small: int, n_big: int, off: int) -> np.ndarray:
    """svec(n_small) -> svec(n_big) placing the block at (off, off)."""
    pairs_big = {p: r for r, p in enumerate(_pairs(n_big))}
    out = np.zeros((len(pairs_big), len(_pairs(n_small))))
    for c, (i, j) in enumerate(_pairs(n_small)):
        out[pairs_big[(i + off, j + off)], c] = 1.0
    return out


def _u_block_map(n: int, m: int) -> np.ndarray:
    """vec(U, m x n row-major) -> svec(n+m) with U in the (n.., 0..n) block."""
    d = n + m
    pairs = {p: r for r, p in enumerate(_pairs(d))}
    out = np.zeros((len(pairs), m * n))
    for i in range(m):
        for j in range(n):
            out[pairs[(n + i, j)], i * n + j] = 1.0
    return out


def _pairs(n):
    return [(i, j) for j in range(n) for i in range(j, n)]


def _pinv_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w_max = max(float(w[-1]), 0.0)
    inv = np.where(w > GAIN_SV_CUTOFF * max(w_max, 1e-300), 1.0 / np.where(w == 0, 1.0, w), 0.0)
    return (v * inv) @ v.T


# ---------------------------------------------------------------------------
# exact audits and the feasibility polish
# ---------------------------------------------------------------------------

def _set_margins(system, policy, traj, state_cons, control_cons, with_r: bool,
                 with_p: bool) -> float:
    """Worst exact slack of the original constraints along a propagated trajectory."""
    worst = np.inf
    N = policy.horizon
    for k in range(N + 1):
        r_k = traj.r_shape[k] if with_r else None
        p_k = traj.p_shape[k] if with_p else None
        for c in state_cons:
            worst = min(worst, chance_margin(c, traj.mu[k], traj.sigma[k], r_k, p_k))
        if k == N:
            break
        for c in control_cons:
            worst = min(worst, chance_margin(
                c, traj.mu[k], traj.sigma[k], r_k, None,
                ubar=policy.ubar[k], gain=policy.gains[k]))
    return float(worst)


def _terminal_ball_slack(traj, target: TargetBall, with_r: bool) -> float:
    mu_n, sig_n = traj.mu[-1], traj.sigma[-1]
    lhs = float(np.linalg.norm(mu_n - target.center))
    lhs += target.quantile * math.sqrt(max(sym_eig_extremes(sig_n)[1], 0.0))
    if with_r:
        lhs += math.sqrt(max(sym_eig_extremes(traj.r_shape[-1])[1], 0.0))
    return target.radius - lhs


def _terminal_ell_slack(traj, target: TargetEllBall, s_point: np.ndarray,
                        with_r: bool) -> tuple[float, bool]:
    mu_n, sig_n = traj.mu[-1], traj.sigma[-1]
    lhs = float(np.linalg.norm(mu_n - s_point))
    lhs += target.quantile * math.sqrt(max(sym_eig_extremes(sig_n)[1], 0.0))
    if with_r:
        lhs += math.sqrt(max(sym_eig_extremes(traj.r_shape[-1])[1], 0.0))
    contained = ellipsoid_contained(
        Ellipsoid(s_point, traj.p_shape[-1]), Ellipsoid(target.center, target.shape),
        tol=ACCEPT_TOL)
    return target.radius - lhs, contained


def _polish_scale(eval_slack, lo: float = 0.0, hi: float = 1.0, iters: int = 60) -> float | None:
    """Largest scale in [lo, hi] with nonnegative slack (monotone), None if none."""
    if eval_slack(hi) >= 0.0:
        return hi
    if eval_slack(lo) < 0.0:
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if eval_slack(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# ball-target programs (upper bound and radius)
# ---------------------------------------------------------------------------

def max_cov_ball_ub(system: LinearSystem, mu_q: np.ndarray, target: TargetBall,
                    horizon: int, refs: SteeringRefs, state_cons, control_cons,
                    lambda_cap: float = LAMBDA_MAX_DEFAULT, tolerance: float | None = None,
                    backend: str = "clarabel", max_rounds: int = 10,
                    sigma0_fixed: np.ndarray | None = None) -> EdgeResult:
    """Maximize lambda_min(Sigma_0) such that N(mu_q, Sigma_0) reaches the ball
    target; terminal square root linearized at an iterated reference radius."""
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    margin = _audit_margin(tolerance)
    r_ref = min(max(refs.r_ref, 1e-9), target.radius) if refs.r_ref else target.radius / 2.0
    history = []
    core = _SteeringCore(system, mu_q, horizon, refs, state_cons, control_cons,
                         name="max_cov_ball_ub", margin=margin)
    prog = core.prog
    if sigma0_fixed is not None:
        core.fix_sigma0(sigma0_fixed)
    prog.maximize_lambda_min(core.sig[0], cap=lambda_cap)
    w = prog.add_scalar("w_mean_gap")
    prog.add_soc(AffExpr.of_var(w),
                 AffExpr.of_var(core.mu[-1]) + AffExpr.constant(-target.center),
                 name="terminal_gap")
    z = prog.add_scalar("z_lam_max")
    zcap = SymExpr.scaled_identity(system.n, z) + \
        SymExpr.from_sym_var(core.sig[-1]).scaled(-1.0)
    prog.add_lmi(zcap, name="terminal_lam_cap")
    base_constraints = len(prog.constraints)
    sol = None
    for round_idx in range(max_rounds):
        # only the linearized terminal changes across reference rounds
        del prog.constraints[base_constraints:]
        coef = target.quantile ** 2 / (2.0 * r_ref)
        prog.add_ineq(AffExpr.of_var(w)
                      + AffExpr.of_var(z, np.array([[coef]]))
                      + AffExpr.constant([r_ref / 2.0 - target.radius + margin]),
                      name="terminal_linearized")
        sol = _solve(prog, tolerance, backend)
        if sol.status != Status.OPTIMAL:
            return EdgeResult(sol.status, diagnostics={
                "rounds": history, "failed_round": round_idx})
        lam = max(sol.objective, 0.0)
        history.append({"r_ref": r_ref, "lambda_min": lam})
        r_new = min(max(target.quantile * math.sqrt(lam), 1e-9), target.radius)
        if abs(r_new - r_ref) <= 1e-4 * max(r_ref, 1e-12):
            break
        r_ref = r_new
    return _finish_gaussian_edge(system, core, sol, mu_q, target, state_cons, control_cons,
                                 history, p_chain=None)


def _finish_gaussian_edge(system, core, sol, mu_q, target, state_cons, control_cons,
                          history, p_chain, s_witness=None,
                          terminal_mean_eq=None, cov_cap=None) -> EdgeResult:
    """Shared recovery, polish, and exact audit for the single-Gaussian programs."""
    policy, sigma0 = core.extract_policy(sol, mu_q)
    sigma0 = psd_project(sigma0, rel_tol=1e-6)
    p0 = p_chain[0] if p_chain is not None else None

    def slack_at(scale):
        traj = propagate(system, policy, mu_q, scale * sigma0, p0=p0)
        worst = _set_margins(system, policy, traj, state_cons, control_cons,
                             with_r=False, with_p=p_chain is not None)
        if target is not None:
            if s_witness is not None:
                t_slack, contained = _terminal_ell_slack(traj, target, s_witness, with_r=False)
                worst = min(worst, t_slack, 0.0 if not contained else np.inf)
            else:
                worst = min(worst, _terminal_ball_slack(traj, target, with_r=False))
        if terminal_mean_eq is not None:
            gap = float(np.linalg.norm(traj.mu[-1] - terminal_mean_eq))
            worst = min(worst, ACCEPT_TOL - gap)
        if cov_cap is not None:
            lam_n = sym_eig_extremes(traj.sigma[-1])[1]
            worst = min(worst, cov_cap - lam_n)
        return worst

    scale = _polish_scale(slack_at, 0.0, 1.0)
    report = verify_solution(core.prog, sol, ACCEPT_TOL)
    if scale is None or not report.ok:
        return EdgeResult(Status.NUMERICAL_FAILURE, diagnostics={
            "rounds": history, "audit": "exact audit failed",
            "verify": report.failures if report else None})
    sigma0 = scale * sigma0
    traj = propagate(system, policy, mu_q, sigma0, p0=p0)
    return EdgeResult(
        Status.OPTIMAL, policy=policy, sigma0=sigma0,
        s_witness=s_witness,
        shape0=p0,
        terminal_mu=traj.mu[-1], terminal_sigma=traj.sigma[-1],
        terminal_r_shape=traj.r_shape[-1], terminal_p_shape=traj.p_shape[-1],
        diagnostics={"rounds": history, "polish_scale": scale,
                     "duality_gap": sol.duality_gap,
                     "verify_worst": report.worst()})


def _isotropic_radius_estimate(system, policy, traj, target_margin, state_cons,
                               control_cons, p_chain, lambda_cap) -> float:
    """Largest rho with R_0 = rho*I feasible for the exact radius constraints.

    Every constraint is monotone in R_0 (PSD order), so this also equals the
    optimal lambda_min of the radius program; used to seed the M1 reference.
    """
    N = policy.horizon
    rho = lambda_cap
    acl_n = traj.acl(0, N - 1)
    lam_n = sym_eig_extremes(acl_n @ acl_n.T)[1]
    if lam_n > 1e-16:
        rho = min(rho, max(target_margin, 0.0) ** 2 / lam_n)
    for k in range(N + 1):
        acl = traj.acl(0, k - 1)
        for c in state_cons:
            base = float(c.a @ traj.mu[k])
            base += c.quantile * math.sqrt(max(float(c.a @ traj.sigma[k] @ c.a), 0.0))
            if p_chain is not None:
                base += math.sqrt(max(float(c.a @ p_chain[k] @ c.a), 0.0))
            budget = c.b - base
            if budget < 0.0:
                return 0.0
            g = float(c.a @ acl @ acl.T @ c.a)
            if g > 1e-16:
                rho = min(rho, budget ** 2 / g)
        if k == N:
            break
        for c in control_cons:
            a_eff = policy.gains[k].T @ c.a
            base = float(c.a @ policy.ubar[k])
            base += c.quantile * math.sqrt(max(float(a_eff @ traj.sigma[k] @ a_eff), 0.0))
            budget = c.b - base
            if budget < 0.0:
                return 0.0
            g = float(a_eff @ acl @ acl.T @ a_eff)
            if g > 1e-16:
                rho = min(rho, budget ** 2 / g)
    return rho


def _radius_program(system, policy, traj, target_margin: float, refs: SteeringRefs,
                    state_cons, control_cons, p_chain, lambda_cap, tolerance, backend,
                    max_rounds: int = 5):
    """Maximize lambda_min(R_0) for a fixed policy; M1-linearized sqrt terms with
    fixed-point refinement of the R reference."""
    margin = _audit_margin(tolerance)
    n, N = system.n, policy.horizon
    acl_maps = []
    for k in range(N + 1):
        acl_maps.append(congruence_map(traj.acl(0, k - 1)))
    rho = _isotropic_radius_estimate(system, policy, traj, target_margin, state_cons,
                                     control_cons, p_chain, lambda_cap)
    if rho <= 0.0:
        return None, [{"round": -1, "radius": 0.0, "note": "isotropic estimate zero"}]
    # seed the reference at the isotropic optimum (which also equals the optimal
    # lambda_min by constraint monotonicity); the fixed-point loop refines it
    r_r = rho * np.eye(n)
    history = [{"round": -1, "isotropic_estimate": math.sqrt(rho)}]
    best = None
    r_prev = None
    for round_idx in range(max_rounds):
        prog = ConicProgram("max_cov_ball_radius")
        r0 = prog.add_sym("R0", n)
        t_floor = prog.maximize_lambda_min(r0, cap=lambda_cap)
        prog.add_ineq(AffExpr.of_var(t_floor, np.array([[-1.0]])), name="floor_nn")
        term = SymExpr.from_const(max(target_margin - margin, 0.0) ** 2 * np.eye(n)) + \
            SymExpr.from_sym_var(r0, -acl_maps[N])
        prog.add_lmi(term, name="terminal_shape_cap")
        r_r_svec = svec_of(r_r)
        for k in range(N + 1):
            for ci, c in enumerate(state_cons):
                base = float(c.a @ traj.mu[k])
                base += c.quantile * math.sqrt(max(float(c.a @ traj.sigma[k] @ c.a), 0.0))
                if p_chain is not None:
                    base += math.sqrt(max(float(c.a @ p_chain[k] @ c.a), 0.0))
                rk_row = quad_row(c.a) @ acl_maps[k]
                ref = float(rk_row @ r_r_svec)  # reference propagated like R_k
                if ref <= 1e-300:
                    continue  # the shape cannot reach this constraint direction
                row = rk_row / (2.0 * math.sqrt(ref))
                const = base + math.sqrt(ref) / 2.0 - c.b + margin
                prog.add_ineq(AffExpr.of_var(r0, row.reshape(1, -1))
                              + AffExpr.constant([const]), name=f"state{ci}_k{k}")
            if k == N:
                break
            for ci, c in enumerate(control_cons):
                a_eff = policy.gains[k].T @ c.a
                base = float(c.a @ policy.ubar[k])
                base += c.quantile * math.sqrt(max(float(a_eff @ traj.sigma[k] @ a_eff), 0.0))
                if np.linalg.norm(a_eff) <= 1e-14:
                    if base - c.b > 0:
                        return None, history  # constant violation, no radius exists
                    continue
                rk_row = quad_row(a_eff) @ acl_maps[k]
                ref = float(rk_row @ r_r_svec)
                if ref <= 1e-300:
                    continue
                row = rk_row / (2.0 * math.sqrt(ref))
                const = base + math.sqrt(ref) / 2.0 - c.b + margin
                prog.add_ineq(AffExpr.of_var(r0, row.reshape(1, -1))
                              + AffExpr.constant([const]), name=f"control{ci}_k{k}")
        sol = _solve(prog, tolerance, backend)
        if sol.status != Status.OPTIMAL:
            history.append({"round": round_idx, "status": sol.status.value})
            return best, history
        lam = max(sol.objective, 0.0)
        r_now = math.sqrt(lam)
        history.append({"round": round_idx, "radius": r_now})
        best = (psd_project(sol.value(r0), rel_tol=1e-6), sol, prog)
        r_r = best[0] + 1e-12 * max(lam, 1.0) * np.eye(n)
        if r_prev is not None and abs(r_now - r_prev) < 1e-6:
            break
        r_prev = r_now
    return best, history


def max_cov_ball_radius(system: LinearSystem, policy: ControlPolicy, mu_q: np.ndarray,
                        target: TargetBall, refs: SteeringRefs, state_cons, control_cons,
                        lambda_cap: float = LAMBDA_MAX_DEFAULT,
                        tolerance: float | None = None,
                        backend: str = "clarabel") -> EdgeResult:
    """Maximal certified ball radius for a fixed policy (mean-set propagation
    starts at Sigma_0 = 0; radius 0 when the terminal margin is nonpositive)."""
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    traj = propagate(system, policy, mu_q, np.zeros((system.n, system.n)))
    margin = _terminal_ball_slack(traj, target, with_r=False)
    zero = EdgeResult(Status.OPTIMAL, policy=policy, radius=0.0,
                      terminal_mu=traj.mu[-1], terminal_sigma=traj.sigma[-1],
                      diagnostics={"terminal_margin": margin})
    if margin <= 0.0:
        return zero
    best, history = _radius_program(system, policy, traj, margin, refs, state_cons,
                                    control_cons, None, lambda_cap, tolerance, backend)
    if best is None:
        zero.diagnostics["rounds"] = history
        return zero
    r0, sol, prog = best
    return _finish_radius_edge(system, policy, mu_q, target, state_cons, control_cons,
                               r0, sol, prog, history, p_chain=None, s_witness=None)


def _finish_radius_edge(system, policy, mu_q, target, state_cons, control_cons,
                        r0, sol, prog, history, p_chain, s_witness) -> EdgeResult:
    p0 = p_chain[0] if p_chain is not None else None

    def slack_at(scale):
        traj = propagate(system, policy, mu_q, np.zeros((system.n, system.n)),
                         r0=scale * r0, p0=p0)
        worst = _set_margins(system, policy, traj, state_cons, control_cons,
                             with_r=True, with_p=p_chain is not None)
        if s_witness is not None:
            t_slack, contained = _terminal_ell_slack(traj, target, s_witness, with_r=True)
            worst = min(worst, t_slack, 0.0 if not contained else np.inf)
        else:
            worst = min(worst, _terminal_ball_slack(traj, target, with_r=True))
        return worst

    scale = _polish_scale(slack_at, 0.0, 1.0)
    report = verify_solution(prog, sol, ACCEPT_TOL)
    if scale is None or not report.ok:
        return EdgeResult(Status.OPTIMAL, policy=policy, radius=0.0,
                          diagnostics={"rounds": history, "audit": "radius audit failed"})
    r0 = scale * r0
    radius = math.sqrt(max(sym_eig_extremes(r0)[0], 0.0))
    traj = propagate(system, policy, mu_q, np.zeros((system.n, system.n)), r0=r0, p0=p0)
    return EdgeResult(Status.OPTIMAL, policy=policy, radius=radius, s_witness=s_witness,
                      shape0=p0,
                      terminal_mu=traj.mu[-1], terminal_sigma=traj.sigma[-1],
                      terminal_r_shape=traj.r_shape[-1], terminal_p_shape=traj.p_shape[-1],
                      diagnostics={"rounds": history, "polish_scale": scale,
                                   "r_shape0": r0.tolist()})


# ---------------------------------------------------------------------------
# MAXCOVAR / RANDCOVAR baselines
# ---------------------------------------------------------------------------

def maxcovar_baseline(system: LinearSystem, mu_q: np.ndarray, node_center: np.ndarray,
                      cov_cap_eig: float, horizon: int, refs: SteeringRefs,
                      state_cons, control_cons, lambda_cap: float = LAMBDA_MAX_DEFAULT,
                      tolerance: float | None = None, backend: str = "clarabel",
                      sigma0_fixed: np.ndarray | None = None) -> EdgeResult:
    """Maximize lambda_min(Sigma_0) with terminal mean equality and covariance cap
    (fixed Sigma_0 turns it into the RANDCOVAR feasibility variant)."""
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    node_center = np.asarray(node_center, dtype=float).reshape(-1)
    margin = _audit_margin(tolerance)
    core = _SteeringCore(system, mu_q, horizon, refs, state_cons, control_cons,
                         name="maxcovar", margin=margin)
    prog = core.prog
    if sigma0_fixed is None:
        prog.maximize_lambda_min(core.sig[0], cap=lambda_cap)
    else:
        core.fix_sigma0(sigma0_fixed)
        slack = prog.add_scalar("feas_obj")
        prog.add_ineq(AffExpr.of_var(slack, np.array([[-1.0]])))
        prog.add_ineq(AffExpr.of_var(slack) + AffExpr.constant([-1.0]))
        prog.maximize(AffExpr.of_var(slack))
    prog.add_eq(AffExpr.of_var(core.mu[-1]) + AffExpr.constant(-node_center),
                name="terminal_mean")
    cap = SymExpr.from_const((cov_cap_eig - margin) * np.eye(system.n)) + \
        SymExpr.from_sym_var(core.sig[-1]).scaled(-1.0)
    prog.add_lmi(cap, name="terminal_cov_cap")
    sol = _solve(prog, tolerance, backend)
    if sol.status != Status.OPTIMAL:
        return EdgeResult(sol.status, diagnostics={"program": "maxcovar"})
    return _finish_gaussian_edge(system, core, sol, mu_q, None, state_cons, control_cons,
                                 [], p_chain=None, terminal_mean_eq=node_center,
                                 cov_cap=cov_cap_eig + ACCEPT_TOL)


# ---------------------------------------------------------------------------
# ellipsoid containment helpers
# ---------------------------------------------------------------------------

def _inv_sqrt_pd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w[-1] <= 0.0 or w[0] <= 1e-14 * float(w[-1]):
        raise ValueError("matrix must be positive definite")
    return (v / np.sqrt(w)) @ v.T


def _containment_lmi(prog: ConicProgram, goal_center: np.ndarray, goal_shape: np.ndarray,
                     d_expr: AffExpr, z_columns, name: str = "containment"):
    """Exact affine LMI for E(c1, Z Z') inside E(goal): lifted S-lemma form
    [[sigma I, 0, Z'], [0, 1 - sigma, e'], [Z, e, I]] >= 0 with e = F d,
    Z = F * (inner root), F the inverse square root of the goal shape."""
    n = goal_center.shape[0]
    F = _inv_sqrt_pd(goal_shape)
    order = 2 * n + 1
    sigma = prog.add_scalar(f"_{name}_sigma")
    prog.add_ineq(AffExpr.of_var(sigma, np.array([[-1.0]])), name=f"{name}_sigma_nn")
    expr = SymExpr.from_const(_corner_identity(order, n + 1))
    for i in range(n):
        expr = expr + sym_place_scalar(order, AffExpr.of_var(sigma), i)
    one_minus = AffExpr.of_var(sigma, np.array([[-1.0]])) + AffExpr.constant([1.0])
    expr = expr + sym_place_scalar(order, one_minus, n)
    expr = expr + sym_place_vector(order, d_expr, n + 1, n, left=F)
    for j, col in enumerate(z_columns):
        expr = expr + sym_place_vector(order, col, n + 1, j, left=F)
    prog.add_lmi(expr, name=name)
    return sigma


def _corner_identity(order: int, off: int) -> np.ndarray:
    m = np.zeros((order, order))
    for i in range(off, order):
        m[i, i] = 1.0
    return m


def solve_s_star(mu_n: np.ndarray, p_n: np.ndarray, goal_center: np.ndarray,
                 goal_shape: np.ndarray, tolerance: float | None = None,
                 backend: str = "clarabel") -> np.ndarray:
    """Witness placement: minimize ||s - mu_N|| over the containment LMI of
    E(s, P_N) in the goal ellipsoid; exact containment re-verified."""
    mu_n = np.asarray(mu_n, dtype=float).reshape(-1)
    goal_center = np.asarray(goal_center, dtype=float).reshape(-1)
    n = mu_n.shape[0]
    p_n = psd_project(p_n, rel_tol=1e-8)
    prog = ConicProgram("s_star")
    s = prog.add_vector("s", n)
    t = prog.add_scalar("t")
    prog.add_soc(AffExpr.of_var(t), AffExpr.of_var(s) + AffExpr.constant(-mu_n), name="dist")
    e_root = psd_sqrt(p_n)
    d_expr = AffExpr.of_var(s) + AffExpr.constant(-goal_center)
    z_cols = [AffExpr.constant(e_root[:, j]) for j in range(n)]
    _containment_lmi(prog, goal_center, goal_shape, d_expr, z_cols)
    prog.minimize(AffExpr.of_var(t))
    sol = _solve(prog, tolerance, backend)
    if sol.status != Status.OPTIMAL:
        raise ValueError(f"witness placement infeasible (status {sol.status.value})")
    s_val = sol.value(s)
    if not ellipsoid_contained(Ellipsoid(s_val, p_n), Ellipsoid(goal_center, goal_shape),
                               tol=ACCEPT_TOL):
        raise ValueError("witness placement failed the exact containment check")
    return s_val


# ---------------------------------------------------------------------------
# ellipsoid-ball programs
# ---------------------------------------------------------------------------

def _p_chain(system: LinearSystem, p0: np.ndarray, horizon: int) -> list[np.ndarray]:
    chain = [psd_project(p0, rel_tol=1e-8)]
    for _ in range(horizon):
        chain.append(system.A @ chain[-1] @ system.A.T)
    return chain


def max_ell_ball_ub(system: LinearSystem, mu_q: np.ndarray, p0: np.ndarray,
                    target: TargetEllBall, horizon: int, refs: SteeringRefs,
                    state_cons, control_cons, lambda_cap: float = LAMBDA_MAX_DEFAULT,
                    tolerance: float | None = None, backend: str = "clarabel",
                    max_rounds: int = 10,
                    sigma0_fixed: np.ndarray | None = None) -> EdgeResult:
    """Ellipsoid-ball analogue of the upper-bound program: adds the witness
    point s, the shifted-copy containment of the propagated witness ellipsoid,
    and constant witness-spread terms in the state constraints."""
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    chain = _p_chain(system, p0, horizon)
    fg = _inv_sqrt_pd(target.shape)
    gamma = max(sym_eig_extremes(fg @ chain[-1] @ fg)[1], 0.0)
    tau = math.sqrt(gamma)
    if tau >= 1.0 - 1e-12:
        return EdgeResult(Status.INFEASIBLE,
                          diagnostics={"reason": "containment impossible", "tau": tau})
    margin = _audit_margin(tolerance)
    r_ref = min(max(refs.r_ref, 1e-9), target.radius) if refs.r_ref else target.radius / 2.0
    history = []
    core = _SteeringCore(system, mu_q, horizon, refs, state_cons, control_cons,
                         p_chain=chain, name="max_ell_ball_ub", margin=margin)
    prog = core.prog
    if sigma0_fixed is not None:
        core.fix_sigma0(sigma0_fixed)
    prog.maximize_lambda_min(core.sig[0], cap=lambda_cap)
    s_var = prog.add_vector("s", system.n)
    # witness stays inside the tau-contracted goal ellipsoid
    prog.add_soc(AffExpr.constant([1.0 - tau]),
                 AffExpr.of_var(s_var, fg) + AffExpr.constant(-fg @ target.center),
                 name="witness_containment")
    w = prog.add_scalar("w_mean_gap")
    prog.add_soc(AffExpr.of_var(w),
                 AffExpr.of_var(core.mu[-1]) + AffExpr.of_var(s_var, -np.eye(system.n)),
                 name="terminal_gap")
    z = prog.add_scalar("z_lam_max")
    prog.add_lmi(SymExpr.scaled_identity(system.n, z)
                 + SymExpr.from_sym_var(core.sig[-1]).scaled(-1.0),
                 name="terminal_lam_cap")
    base_constraints = len(prog.constraints)
    sol = None
    for round_idx in range(max_rounds):
        del prog.constraints[base_constraints:]
        coef = target.quantile ** 2 / (2.0 * r_ref)
        prog.add_ineq(AffExpr.of_var(w) + AffExpr.of_var(z, np.array([[coef]]))
                      + AffExpr.constant([r_ref / 2.0 - target.radius + margin]),
                      name="terminal_linearized")
        sol = _solve(prog, tolerance, backend)
        if sol.status != Status.OPTIMAL:
            return EdgeResult(sol.status, diagnostics={
                "rounds": history, "failed_round": round_idx, "tau": tau})
        lam = max(sol.objective, 0.0)
        history.append({"r_ref": r_ref, "lambda_min": lam})
        r_new = min(max(target.quantile * math.sqrt(lam), 1e-9), target.radius)
        if abs(r_new - r_ref) <= 1e-4 * max(r_ref, 1e-12):
            break
        r_ref = r_new
    s_val = sol.value(s_var)
    result = _finish_gaussian_edge(system, core, sol, mu_q, target, state_cons,
                                   control_cons, history, p_chain=chain, s_witness=s_val)
    result.diagnostics["tau"] = tau
    return result


def max_ell_ball_radius(system: LinearSystem, policy: ControlPolicy, mu_q: np.ndarray,
                        p0: np.ndarray, target: TargetEllBall, refs: SteeringRefs,
                        state_cons, control_cons, lambda_cap: float = LAMBDA_MAX_DEFAULT,
                        tolerance: float | None = None,
                        backend: str = "clarabel") -> EdgeResult:
    """Maximal certified radius for a fixed policy with the witness fixed at s*."""
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    chain = _p_chain(system, p0, policy.horizon)
    traj = propagate(system, policy, mu_q, np.zeros((system.n, system.n)), p0=chain[0])
    zero = EdgeResult(Status.OPTIMAL, policy=policy, radius=0.0, shape0=chain[0])
    try:
        s_star = solve_s_star(traj.mu[-1], chain[-1], target.center, target.shape,
                              tolerance, backend)
    except ValueError as exc:
        zero.diagnostics["s_star"] = str(exc)
        return zero
    margin, contained = _terminal_ell_slack(traj, target, s_star, with_r=False)
    zero.s_witness = s_star
    zero.terminal_mu, zero.terminal_sigma = traj.mu[-1], traj.sigma[-1]
    zero.diagnostics["terminal_margin"] = margin
    if margin <= 0.0 or not contained:
        return zero
    best, history = _radius_program(system, policy, traj, margin, refs, state_cons,
                                    control_cons, chain, lambda_cap, tolerance, backend)
    if best is None:
        zero.diagnostics["rounds"] = history
        return zero
    r0, sol, prog = best
    return _finish_radius_edge(system, policy, mu_q, target, state_cons, control_cons,
                               r0, sol, prog, history, p_chain=chain, s_witness=s_star)


# ---------------------------------------------------------------------------
# MAXELLIPSOID / MAXCOVARELL baselines
# ---------------------------------------------------------------------------

def maxellipsoid_baseline(system: LinearSystem, mu_q: np.ndarray, sigma_q: np.ndarray,
                          node_center: np.ndarray, node_cov_cap_eig: float,
                          node_shape: np.ndarray, horizon: int, refs: SteeringRefs,
                          state_cons, control_cons, tolerance: float | None = None,
                          backend: str = "clarabel") -> EdgeResult:
    """Maximize det(P_0) for fixed query covariance, subject to terminal
    ellipsoid containment, covariance cap, and chance constraints.  P_0 is
    parameterized by its Cholesky factor, making the witness-spread terms
    exact second-order cones and the containment LMI affine."""
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    node_center = np.asarray(node_center, dtype=float).reshape(-1)
    n = system.n
    margin = _audit_margin(tolerance)
    core = _SteeringCore(system, mu_q, horizon, refs, state_cons, control_cons,
                         name="maxellipsoid", margin=margin)
    prog = core.prog
    core.fix_sigma0(sigma_q)
    n_l = n * (n + 1) // 2
    ell = prog.add_vector("L", n_l)  # lower-triangular factor, column-major
    lpairs = _pairs(n)
    diag_rows = [idx for idx, (i, j) in enumerate(lpairs) if i == j]
    for idx in diag_rows:
        row = np.zeros((1, n_l))
        row[0, idx] = -1.0
        prog.add_ineq(AffExpr.of_var(ell, row), name=f"L_diag_nn{idx}")
    # state constraints gain exact ||L' A^k' a|| witness-spread terms
    a_pow = np.eye(n)
    a_powers = [a_pow]
    for _ in range(horizon):
        a_pow = system.A @ a_pow
        a_powers.append(a_pow)

    def l_transpose_map(v: np.ndarray) -> np.ndarray:
        out = np.zeros((n, n_l))
        for idx, (i, j) in enumerate(lpairs):
            out[j, idx] = v[i]  # (L'v)_j = sum_{i>=j} L_ij v_i
        return out

    for k in range(horizon + 1):
        for ci, c in enumerate(core.state_cons):
            ref = float(c.a @ refs.sigma_r @ c.a)
            row = c.quantile * quad_row(c.a) / (2.0 * math.sqrt(ref))
            head = AffExpr.of_var(core.mu[k], -c.a.reshape(1, -1)) \
                + AffExpr.of_var(core.sig[k], -row.reshape(1, -1)) \
                + AffExpr.constant([c.b - margin - c.quantile * math.sqrt(ref) / 2.0])
            spread = AffExpr.of_var(ell, l_transpose_map(a_powers[k].T @ c.a))
            prog.add_soc(head, spread, name=f"state_spread{ci}_k{k}")
    cap = SymExpr.from_const((node_cov_cap_eig - margin) * np.eye(n)) + \
        SymExpr.from_sym_var(core.sig[-1]).scaled(-1.0)
    prog.add_lmi(cap, name="terminal_cov_cap")
    d_expr = AffExpr.of_var(core.mu[-1]) + AffExpr.constant(-node_center)
    z_cols = []
    for j in range(n):
        col_map = np.zeros((n, n_l))
        for idx, (i, jj) in enumerate(lpairs):
            if jj == j:
                col_map[i, idx] = 1.0
        z_cols.append(AffExpr.of_var(ell, a_powers[horizon] @ col_map))
    _containment_lmi(prog, node_center, node_shape, d_expr, z_cols)
    t = prog.add_scalar("detroot")
    factors = []
    for idx in diag_rows:
        row = np.zeros((1, n_l))
        row[0, idx] = 1.0
        factors.append(AffExpr.of_var(ell, row))
    prog.add_geomean(AffExpr.of_var(t), factors, name="detroot")
    prog.maximize(AffExpr.of_var(t))
    sol = _solve(prog, tolerance, backend)
    if sol.status != Status.OPTIMAL:
        return EdgeResult(sol.status, diagnostics={"program": "maxellipsoid"})
    l_val = np.zeros((n, n))
    vec = sol.value(ell)
    for idx, (i, j) in enumerate(lpairs):
        l_val[i, j] = vec[idx]
    p0 = psd_project(l_val @ l_val.T, rel_tol=1e-6)
    policy, _ = core.extract_policy(sol, mu_q)

    def slack_at(scale):
        chain = _p_chain(system, scale * p0, policy.horizon)
        traj = propagate(system, policy, mu_q, psd_project(sigma_q, 1e-8), p0=chain[0])
        worst = _set_margins(system, policy, traj, core.state_cons, core.control_cons,
                             with_r=False, with_p=True)
        lam_n = sym_eig_extremes(traj.sigma[-1])[1]
        worst = min(worst, node_cov_cap_eig + ACCEPT_TOL - lam_n)
        contained = ellipsoid_contained(Ellipsoid(traj.mu[-1], traj.p_shape[-1]),
                                        Ellipsoid(node_center, node_shape), tol=ACCEPT_TOL)
        return min(worst, np.inf if contained else -1.0)

    scale = _polish_scale(slack_at, 0.0, 1.0)
    report = verify_solution(prog, sol, ACCEPT_TOL)
    if scale is None or not report.ok:
        return EdgeResult(Status.NUMERICAL_FAILURE,
                          diagnostics={"program": "maxellipsoid", "audit": "failed"})
    p0 = scale * p0
    traj = propagate(system, policy, mu_q, psd_project(sigma_q, 1e-8), p0=p0)
    return EdgeResult(Status.OPTIMAL, policy=policy, sigma0=psd_project(sigma_q, 1e-8),
                      shape0=p0, terminal_mu=traj.mu[-1], terminal_sigma=traj.sigma[-1],
                      terminal_p_shape=traj.p_shape[-1],
                      diagnostics={"det_root": sol.objective, "polish_scale": scale})


def maxcovarell_baseline(system: LinearSystem, mu_q: np.ndarray, p0: np.ndarray,
                         node_center: np.ndarray, node_cov_cap_eig: float,
                         node_shape: np.ndarray, horizon: int, refs: SteeringRefs,
                         state_cons, control_cons, lambda_cap: float = LAMBDA_MAX_DEFAULT,
                         tolerance: float | None = None,
                         backend: str = "clarabel") -> EdgeResult:
    """Maximize lambda_min(Sigma_0) for a fixed witness ellipsoid P_0 with the
    terminal covariance cap and containment of the propagated ellipsoid."""
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    node_center = np.asarray(node_center, dtype=float).reshape(-1)
    chain = _p_chain(system, p0, horizon)
    margin = _audit_margin(tolerance)
    core = _SteeringCore(system, mu_q, horizon, refs, state_cons, control_cons,
                         p_chain=chain, name="maxcovarell", margin=margin)
    prog = core.prog
    prog.maximize_lambda_min(core.sig[0], cap=lambda_cap)
    cap = SymExpr.from_const((node_cov_cap_eig - margin) * np.eye(system.n)) + \
        SymExpr.from_sym_var(core.sig[-1]).scaled(-1.0)
    prog.add_lmi(cap, name="terminal_cov_cap")
    e_root = psd_sqrt(chain[-1])
    d_expr = AffExpr.of_var(core.mu[-1]) + AffExpr.constant(-node_center)
    z_cols = [AffExpr.constant(e_root[:, j]) for j in range(system.n)]
    _containment_lmi(prog, node_center, node_shape, d_expr, z_cols)
    sol = _solve(prog, tolerance, backend)
    if sol.status != Status.OPTIMAL:
        return EdgeResult(sol.status, diagnostics={"program": "maxcovarell"})
    policy, sigma0 = core.extract_policy(sol, mu_q)
    sigma0 = psd_project(sigma0, rel_tol=1e-6)

    def slack_at(scale):
        traj = propagate(system, policy, mu_q, scale * sigma0, p0=chain[0])
        worst = _set_margins(system, policy, traj, core.state_cons, core.control_cons,
                             with_r=False, with_p=True)
        lam_n = sym_eig_extremes(traj.sigma[-1])[1]
        worst = min(worst, node_cov_cap_eig + ACCEPT_TOL - lam_n)
        contained = ellipsoid_contained(Ellipsoid(traj.mu[-1], traj.p_shape[-1]),
                                        Ellipsoid(node_center, node_shape), tol=ACCEPT_TOL)
        return min(worst, np.inf if contained else -1.0)

    scale = _polish_scale(slack_at, 0.0, 1.0)
    report = verify_solution(prog, sol, ACCEPT_TOL)
    if scale is None or not report.ok:
        return EdgeResult(Status.NUMERICAL_FAILURE,
                          diagnostics={"program": "maxcovarell", "audit": "failed"})
    sigma0 = scale * sigma0
    traj = propagate(system, policy, mu_q, sigma0, p0=chain[0])
    return EdgeResult(Status.OPTIMAL, policy=policy, sigma0=sigma0, shape0=chain[0],
                      terminal_mu=traj.mu[-1], terminal_sigma=traj.sigma[-1],
                      terminal_p_shape=traj.p_shape[-1],
                      diagnostics={"polish_scale": scale})
