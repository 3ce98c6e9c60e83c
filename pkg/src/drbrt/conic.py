"""Backend-agnostic conic program builder with an independent solution checker.

Programs are assembled from affine expressions over scalar, vector, and
symmetric-matrix variables into linear equality/inequality, second-order-cone,
and LMI constraints, then translated to the Clarabel or SCS canonical form
(min q'x s.t. Ax + s = b, s in K).  verify_solution recomputes every residual
from scratch with numpy only; it never consults the backend.

Symmetric variables and LMI rows use the column-major lower-triangle layout;
plain entries internally, with the sqrt(2) off-diagonal scaling applied only
when PSD cone rows are emitted.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .numerics import sym_eig_extremes

DEFAULT_TOLERANCE = 1e-8
LAMBDA_MAX_DEFAULT = 1e6


def solver_tolerance() -> float:
    """Default solver tolerance, overridable via DRBRT_SOLVER_TOL."""
    raw = os.environ.get("DRBRT_SOLVER_TOL")
    return float(raw) if raw else DEFAULT_TOLERANCE


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"
    ITER_LIMIT = "iter_limit"


# ---------------------------------------------------------------------------
# svec helpers (plain entries, column-major lower triangle)
# ---------------------------------------------------------------------------

def svec_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for j in range(n) for i in range(j, n)]


def svec_size(n: int) -> int:
    return n * (n + 1) // 2


def svec_of(m: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    return np.array([m[i, j] for (i, j) in svec_pairs(n)])


def smat(vals: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    for v, (i, j) in zip(vals, svec_pairs(n)):
        out[i, j] = v
        out[j, i] = v
    return out


def quad_row(a: np.ndarray) -> np.ndarray:
    """Row r with r @ svec(M) = a' M a."""
    n = a.shape[0]
    return np.array([a[i] * a[j] * (1.0 if i == j else 2.0) for (i, j) in svec_pairs(n)])


def congruence_map(A: np.ndarray, n_in: int | None = None) -> np.ndarray:
    """Matrix C with C @ svec(M) = svec(A M A'); A may be rectangular."""
    n_in = A.shape[1] if n_in is None else n_in
    n_out = A.shape[0]
    cols = []
    for (p, q) in svec_pairs(n_in):
        e = np.zeros((n_in, n_in))
        e[p, q] = 1.0
        e[q, p] = 1.0
        cols.append(svec_of(A @ e @ A.T))
    return np.column_stack(cols) if cols else np.zeros((svec_size(n_out), 0))


def pair_sym_map(B: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Matrix C with C @ vec(U) = svec(B U A' + A U' B'); U is m x n row-major."""
    n = A.shape[0]
    m = B.shape[1]
    cols = []
    for i in range(m):
        for j in range(n):
            outer = np.outer(B[:, i], A[:, j])
            cols.append(svec_of(outer + outer.T))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# variables and affine expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Var:
    name: str
    offset: int
    size: int
    kind: str  # "scalar" | "vector" | "sym"
    n: int = 0  # matrix order for sym variables

    def __hash__(self):
        return hash((self.name, self.offset))


class AffExpr:
    """Affine R^dim expression: sum of coef-matrix @ var + const."""

    __slots__ = ("dim", "terms", "const")

    def __init__(self, dim: int, terms: dict | None = None, const=None):
        self.dim = dim
        self.terms = {}
        if terms:
            for var, coef in terms.items():
                coef = np.atleast_2d(np.asarray(coef, dtype=float))
                if coef.shape != (dim, var.size):
                    raise ValueError(
                        f"coefficient for {var.name} has shape {coef.shape}, "
                        f"expected {(dim, var.size)}")
                self.terms[var] = coef
        self.const = np.zeros(dim) if const is None else \
            np.asarray(const, dtype=float).reshape(dim)

    @staticmethod
    def constant(values) -> "AffExpr":
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return AffExpr(values.shape[0], const=values)

    @staticmethod
    def of_var(var: Var, coef=None) -> "AffExpr":
        coef = np.eye(var.size) if coef is None else np.atleast_2d(np.asarray(coef, float))
        return AffExpr(coef.shape[0], {var: coef})

    def __add__(self, other: "AffExpr") -> "AffExpr":
        if self.dim != other.dim:
            raise ValueError("dimension mismatch")
        out = AffExpr(self.dim, const=self.const + other.const)
        for var, coef in self.terms.items():
            out.terms[var] = coef.copy()
        for var, coef in other.terms.items():
            out.terms[var] = out.terms.get(var, 0.0) + coef
        return out

    def scaled(self, alpha: float) -> "AffExpr":
        out = AffExpr(self.dim, const=alpha * self.const)
        out.terms = {v: alpha * c for v, c in self.terms.items()}
        return out

    def value(self, x: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for var, coef in self.terms.items():
            out = out + coef @ x[var.offset:var.offset + var.size]
        return out


class SymExpr(AffExpr):
    """Affine symmetric-matrix expression in svec coordinates (plain entries)."""

    def __init__(self, order: int, terms: dict | None = None, const=None):
        self.order = order
        super().__init__(svec_size(order), terms, const)

    @staticmethod
    def from_const(M: np.ndarray) -> "SymExpr":
        return SymExpr(M.shape[0], const=svec_of(M))

    @staticmethod
    def from_sym_var(var: Var, map_matrix: np.ndarray | None = None,
                     order: int | None = None) -> "SymExpr":
        order = var.n if order is None else order
        coef = np.eye(var.size) if map_matrix is None else map_matrix
        return SymExpr(order, {var: coef})

    @staticmethod
    def scaled_identity(order: int, scalar_var: Var, scale: float = 1.0) -> "SymExpr":
        col = scale * svec_of(np.eye(order)).reshape(-1, 1)
        return SymExpr(order, {scalar_var: col})

    def __add__(self, other):
        base = AffExpr.__add__(self, other)
        out = SymExpr(self.order)
        out.terms, out.const = base.terms, base.const
        return out

    def scaled(self, alpha: float) -> "SymExpr":
        base = AffExpr.scaled(self, alpha)
        out = SymExpr(self.order)
        out.terms, out.const = base.terms, base.const
        return out

    def matrix_value(self, x: np.ndarray) -> np.ndarray:
        return smat(self.value(x), self.order)


def sym_place_vector(order: int, expr: AffExpr, row_off: int, col: int,
                     left: np.ndarray | None = None) -> SymExpr:
    """Symmetric matrix with (left @ expr) in rows row_off.. of column `col`
    (mirrored); the block must lie strictly in the lower triangle."""
    left = np.eye(expr.dim) if left is None else np.asarray(left, dtype=float)
    k = left.shape[0]
    if col >= row_off:
        raise ValueError("vector block must sit strictly below the diagonal")
    pairs = svec_pairs(order)
    lift = np.zeros((len(pairs), k))
    for r, (i, j) in enumerate(pairs):
        if j == col and row_off <= i < row_off + k:
            lift[r, i - row_off] = 1.0
    out = SymExpr(order)
    for var, coef in expr.terms.items():
        out.terms[var] = lift @ left @ coef
    out.const = lift @ left @ expr.const
    return out


def sym_embed(order: int, expr: SymExpr, off: int) -> SymExpr:
    """Embed a smaller symmetric expression as a diagonal block at (off, off)."""
    pairs_big = svec_pairs(order)
    pairs_small = svec_pairs(expr.order)
    rows = {pair: r for r, pair in enumerate(pairs_big)}
    lift = np.zeros((len(pairs_big), len(pairs_small)))
    for r_small, (i, j) in enumerate(pairs_small):
        lift[rows[(i + off, j + off)], r_small] = 1.0
    out = SymExpr(order)
    for var, coef in expr.terms.items():
        out.terms[var] = lift @ coef
    out.const = lift @ expr.const
    return out


def sym_place_scalar(order: int, expr: AffExpr, idx: int) -> SymExpr:
    """Symmetric matrix with a scalar affine expression at diagonal entry (idx, idx)."""
    pairs = svec_pairs(order)
    row = pairs.index((idx, idx))
    lift = np.zeros((len(pairs), 1))
    lift[row, 0] = 1.0
    out = SymExpr(order)
    for var, coef in expr.terms.items():
        out.terms[var] = lift @ coef
    out.const = lift @ expr.const
    return out


# ---------------------------------------------------------------------------
# program
# ---------------------------------------------------------------------------

@dataclass
class _Constraint:
    kind: str  # "eq" | "ineq" | "soc" | "lmi"
    name: str
    exprs: tuple


@dataclass
class VerifyReport:
    ok: bool
    max_eq_residual: float
    max_ineq_violation: float
    max_cone_violation: float
    min_lmi_eig: float
    failures: list

    def worst(self) -> float:
        return max(self.max_eq_residual, self.max_ineq_violation,
                   self.max_cone_violation, -min(self.min_lmi_eig, 0.0))


@dataclass
class Solution:
    status: Status
    x: np.ndarray | None
    objective: float | None
    duality_gap: float | None
    iterations: int
    solve_time: float
    residuals: VerifyReport | None
    program: "ConicProgram"

    def value(self, var: Var):
        if self.x is None:
            raise ValueError("no primal point available")
        chunk = self.x[var.offset:var.offset + var.size]
        if var.kind == "scalar":
            return float(chunk[0])
        if var.kind == "vector":
            return chunk.copy()
        return smat(chunk, var.n)


class ConicProgram:
    """Conic program over scalar/vector/symmetric variables."""

    def __init__(self, name: str = ""):
        self.name = name
        self.variables: list[Var] = []
        self._names: set[str] = set()
        self.constraints: list[_Constraint] = []
        self.objective: AffExpr | None = None
        self.sense = "max"
        self._nx = 0
        self._aux = 0

    # -- variables ---------------------------------------------------------
    def _register(self, name: str, size: int, kind: str, n: int = 0) -> Var:
        if name in self._names:
            raise ValueError(f"duplicate variable name {name!r}")
        var = Var(name, self._nx, size, kind, n)
        self.variables.append(var)
        self._names.add(name)
        self._nx += size
        return var

    def add_scalar(self, name: str) -> Var:
        return self._register(name, 1, "scalar")

    def add_vector(self, name: str, n: int) -> Var:
        return self._register(name, n, "vector")

    def add_sym(self, name: str, n: int) -> Var:
        return self._register(name, svec_size(n), "sym", n)

    # -- constraints ---------------------------------------------------------
    def add_eq(self, expr: AffExpr, name: str = ""):
        self.constraints.append(_Constraint("eq", name or f"eq{len(self.constraints)}",
                                            (expr,)))

    def add_ineq(self, expr: AffExpr, name: str = ""):
        """Elementwise expr <= 0."""
        self.constraints.append(_Constraint("ineq", name or f"ineq{len(self.constraints)}",
                                            (expr,)))

    def add_soc(self, t_expr: AffExpr, x_expr: AffExpr, name: str = ""):
        """||x_expr||_2 <= t_expr."""
        if t_expr.dim != 1:
            raise ValueError("SOC head must be scalar")
        self.constraints.append(_Constraint("soc", name or f"soc{len(self.constraints)}",
                                            (t_expr, x_expr)))

    def add_lmi(self, expr: SymExpr, name: str = ""):
        """expr >= 0 in the PSD order."""
        self.constraints.append(_Constraint("lmi", name or f"lmi{len(self.constraints)}",
                                            (expr,)))

    # -- objectives ----------------------------------------------------------
    def maximize(self, expr: AffExpr):
        if expr.dim != 1:
            raise ValueError("objective must be scalar")
        self.objective, self.sense = expr, "max"

    def minimize(self, expr: AffExpr):
        if expr.dim != 1:
            raise ValueError("objective must be scalar")
        self.objective, self.sense = expr, "min"

    def maximize_lambda_min(self, sym_var: Var, cap: float = LAMBDA_MAX_DEFAULT) -> Var:
        """max t s.t. X >= t I, X <= cap * I; returns the floor variable."""
        t = self.add_scalar(f"_eig_floor{self._aux}")
        self._aux += 1
        floor = SymExpr.from_sym_var(sym_var) + SymExpr.scaled_identity(sym_var.n, t, -1.0)
        self.add_lmi(floor, name=f"{sym_var.name}_floor")
        capex = SymExpr.from_const(cap * np.eye(sym_var.n)) + \
            SymExpr.from_sym_var(sym_var).scaled(-1.0)
        self.add_lmi(capex, name=f"{sym_var.name}_cap")
        self.maximize(AffExpr.of_var(t))
        return t

    def add_geomean(self, t_expr: AffExpr, factors: list[AffExpr], name: str = "geomean"):
        """t_expr <= geometric mean of nonnegative affine factors (SOC tower)."""
        level = list(factors)
        depth = math.ceil(math.log2(len(level))) if len(level) > 1 else 1
        target = 2 ** depth
        level = level + [t_expr] * (target - len(level))
        stage = 0
        while len(level) > 1:
            nxt = []
            for i in range(0, len(level), 2):
                xe, ye = level[i], level[i + 1]
                z = self.add_scalar(f"_{name}_z{self._aux}")
                self._aux += 1
                self.add_ineq(AffExpr.of_var(z).scaled(-1.0), name=f"{name}_nn{stage}_{i}")
                # z^2 <= x*y  <=>  ||[2z, x - y]|| <= x + y
                two_z = AffExpr.of_var(z, np.array([[2.0]]))
                diff = xe + ye.scaled(-1.0)
                head = xe + ye
                stack = AffExpr(2)
                for var, coef in two_z.terms.items():
                    stack.terms[var] = np.vstack([coef, np.zeros((1, var.size))])
                for var, coef in diff.terms.items():
                    base = stack.terms.get(var, np.zeros((2, var.size)))
                    base = base + np.vstack([np.zeros((1, var.size)), coef])
                    stack.terms[var] = base
                stack.const = np.array([two_z.const[0], diff.const[0]])
                self.add_soc(head, stack, name=f"{name}_soc{stage}_{i}")
                nxt.append(AffExpr.of_var(z))
            level = nxt
            stage += 1
        # t <= root
        self.add_ineq(t_expr + level[0].scaled(-1.0), name=f"{name}_root")

    # -- assembly ------------------------------------------------------------
    def _assemble(self, upper_triangle_psd: bool = False):
        rows_eq, rows_ineq = [], []
        soc_blocks, psd_blocks = [], []
        for con in self.constraints:
            if con.kind == "eq":
                rows_eq.append(con.exprs[0])
            elif con.kind == "ineq":
                rows_ineq.append(con.exprs[0])
            elif con.kind == "soc":
                soc_blocks.append(con.exprs)
            else:
                psd_blocks.append(con.exprs[0])

        data, rows, cols = [], [], []
        b = []
        cursor = 0

        def emit(expr: AffExpr, scale_rows: np.ndarray | None = None):
            nonlocal cursor
            sc = np.ones(expr.dim) if scale_rows is None else scale_rows
            for var, coef in expr.terms.items():
                block = coef * sc[:, None]
                rr, cc = np.nonzero(block)
                data.extend((-block[rr, cc]).tolist())
                rows.extend((rr + cursor).tolist())
                cols.extend((cc + var.offset).tolist())
            b.extend((expr.const * sc).tolist())
            cursor += expr.dim

        for expr in rows_eq:
            emit(expr.scaled(-1.0))  # E x + e = 0  ->  s = b - Ax = 0 with Ax = Ex, b = -e
        n_eq = cursor
        for expr in rows_ineq:
            emit(expr.scaled(-1.0))  # s = -e - Ex >= 0
        n_ineq = cursor - n_eq
        soc_dims = []
        for t_expr, x_expr in soc_blocks:
            emit(t_expr)
            emit(x_expr)
            soc_dims.append(1 + x_expr.dim)
        psd_dims = []
        for expr in psd_blocks:
            pairs = svec_pairs(expr.order)
            scale = np.array([1.0 if i == j else math.sqrt(2.0) for (i, j) in pairs])
            if upper_triangle_psd:
                # reorder rows to upper-triangle column-major (entry (a,b), a<=b,
                # stacked by column b) as expected by Clarabel
                index = {pair: r for r, pair in enumerate(pairs)}
                perm = np.array([index[(b, a)] for b in range(expr.order)
                                 for a in range(b + 1)])
            else:
                perm = np.arange(len(pairs))
            pexpr = AffExpr(expr.dim)
            pexpr.terms = {v: c[perm] for v, c in expr.terms.items()}
            pexpr.const = expr.const[perm]
            emit(pexpr, scale[perm])
            psd_dims.append(expr.order)

        A = sparse.csc_matrix((data, (rows, cols)), shape=(cursor, self._nx))
        b = np.asarray(b)
        q = np.zeros(self._nx)
        if self.objective is not None:
            sign = -1.0 if self.sense == "max" else 1.0
            for var, coef in self.objective.terms.items():
                q[var.offset:var.offset + var.size] += sign * coef[0]
        return A, b, q, n_eq, n_ineq, soc_dims, psd_dims

    # -- solving -------------------------------------------------------------
    def solve(self, tolerance: float | None = None, backend: str = "clarabel") -> Solution:
        tolerance = solver_tolerance() if tolerance is None else tolerance
        A, b, q, n_eq, n_ineq, soc_dims, psd_dims = self._assemble(
            upper_triangle_psd=(backend == "clarabel"))
        if backend == "clarabel":
            sol = _solve_clarabel(A, b, q, n_eq, n_ineq, soc_dims, psd_dims, tolerance)
        elif backend == "scs":
            sol = _solve_scs(A, b, q, n_eq, n_ineq, soc_dims, psd_dims, tolerance)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        status, x, obj, gap, iters, t_solve = sol
        if status == Status.OPTIMAL and self.sense == "max" and obj is not None:
            obj = -obj
        report = None
        if x is not None and status == Status.OPTIMAL:
            report = verify_solution(self, x, max(10.0 * tolerance, 1e-7))
        return Solution(status, x, obj, gap, iters, t_solve, report, self)

    def dump(self) -> str:
        """Plain-text interchange listing for offline debugging."""
        lines = [f"conic program {self.name!r}:"]
        for v in self.variables:
            extra = f" ({v.n}x{v.n} symmetric)" if v.kind == "sym" else ""
            lines.append(f"  var {v.name}: size {v.size}{extra}")
        if self.objective is not None:
            terms = ", ".join(f"{v.name}" for v in self.objective.terms)
            lines.append(f"  {self.sense} linear({terms})")
        for con in self.constraints:
            if con.kind == "soc":
                lines.append(f"  soc {con.name}: ||x({con.exprs[1].dim})|| <= t")
            elif con.kind == "lmi":
                lines.append(f"  lmi {con.name}: {con.exprs[0].order}x{con.exprs[0].order} >= 0")
            else:
                op = "==" if con.kind == "eq" else "<="
                lines.append(f"  {con.kind} {con.name}: dim {con.exprs[0].dim} {op} 0")
        return "\n".join(lines)


def _solve_clarabel(A, b, q, n_eq, n_ineq, soc_dims, psd_dims, tolerance):
    import clarabel

    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    for d in soc_dims:
        cones.append(clarabel.SecondOrderConeT(d))
    for d in psd_dims:
        cones.append(clarabel.PSDTriangleConeT(d))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tolerance
    settings.tol_gap_abs = tolerance
    settings.tol_gap_rel = tolerance
    P = sparse.csc_matrix((A.shape[1], A.shape[1]))
    solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
    res = solver.solve()
    name = str(res.status)
    mapping = {
        "Solved": Status.OPTIMAL,
        "PrimalInfeasible": Status.INFEASIBLE,
        "AlmostPrimalInfeasible": Status.INFEASIBLE,
        "DualInfeasible": Status.UNBOUNDED,
        "AlmostDualInfeasible": Status.UNBOUNDED,
        "AlmostSolved": Status.NUMERICAL_FAILURE,
        "MaxIterations": Status.ITER_LIMIT,
        "MaxTime": Status.ITER_LIMIT,
    }
    status = mapping.get(name, Status.NUMERICAL_FAILURE)
    x = np.asarray(res.x) if status in (Status.OPTIMAL,) else None
    gap = abs(res.obj_val - res.obj_val_dual) if status == Status.OPTIMAL else None
    obj = res.obj_val if status == Status.OPTIMAL else None
    return status, x, obj, gap, res.iterations, res.solve_time


def _solve_scs(A, b, q, n_eq, n_ineq, soc_dims, psd_dims, tolerance):
    import scs

    cone = {}
    if n_eq:
        cone["z"] = n_eq
    if n_ineq:
        cone["l"] = n_ineq
    if soc_dims:
        cone["q"] = soc_dims
    if psd_dims:
        cone["s"] = psd_dims
    solver = scs.SCS({"A": A, "b": b, "c": q}, cone,
                     eps_abs=tolerance, eps_rel=tolerance, verbose=False)
    res = solver.solve()
    status_val = res["info"]["status"]
    mapping = {
        "solved": Status.OPTIMAL,
        "infeasible": Status.INFEASIBLE,
        "unbounded": Status.UNBOUNDED,
    }
    status = mapping.get(status_val, Status.NUMERICAL_FAILURE)
    if "iterations" in res["info"] and status_val.startswith("solved (inaccurate"):
        status = Status.ITER_LIMIT
    x = np.asarray(res["x"]) if status == Status.OPTIMAL else None
    gap = abs(res["info"].get("gap", 0.0)) if status == Status.OPTIMAL else None
    obj = res["info"]["pobj"] if status == Status.OPTIMAL else None
    return status, x, obj, gap, res["info"].get("iter", 0), res["info"].get("solve_time", 0.0)


def verify_solution(program: ConicProgram, solution, tolerance: float) -> VerifyReport:
    """Recompute all residuals from the primal point; independent of the backend.

    Residuals are normalized by each constraint's magnitude (max of 1 and the
    evaluated terms) so the tolerance reads as a relative feasibility measure.
    """
    x = solution if isinstance(solution, np.ndarray) else solution.x
    if x is None:
        raise ValueError("solution carries no primal point")
    max_eq = 0.0
    max_ineq = 0.0
    max_cone = 0.0
    min_eig = np.inf
    failures = []

    def scale_of(expr) -> float:
        s = float(np.abs(expr.const).max()) if expr.dim else 0.0
        for var, coef in expr.terms.items():
            chunk = x[var.offset:var.offset + var.size]
            s = max(s, float(np.abs(coef @ chunk).max()) if coef.size else 0.0)
        return max(s, 1.0)

    for con in program.constraints:
        if con.kind == "eq":
            resid = float(np.abs(con.exprs[0].value(x)).max()) if con.exprs[0].dim else 0.0
            resid /= scale_of(con.exprs[0])
            max_eq = max(max_eq, resid)
            if resid > tolerance:
                failures.append((con.name, resid))
        elif con.kind == "ineq":
            viol = float(con.exprs[0].value(x).max()) if con.exprs[0].dim else 0.0
            viol /= scale_of(con.exprs[0])
            max_ineq = max(max_ineq, viol)
            if viol > tolerance:
                failures.append((con.name, viol))
        elif con.kind == "soc":
            t = float(con.exprs[0].value(x)[0])
            viol = (float(np.linalg.norm(con.exprs[1].value(x))) - t) / max(abs(t), 1.0)
            max_cone = max(max_cone, viol)
            if viol > tolerance:
                failures.append((con.name, viol))
        else:
            m = con.exprs[0].matrix_value(x)
            lo, hi = sym_eig_extremes(m, rel_tol=1e-6)
            lo /= max(abs(hi), 1.0)
            min_eig = min(min_eig, lo)
            if lo < -tolerance:
                failures.append((con.name, lo))
    if min_eig is np.inf:
        min_eig = 0.0
    ok = not failures
    return VerifyReport(ok, max_eq, max_ineq, max_cone, float(min_eig), failures)
