"""Conic IR, backend translation, and independent verification tests."""

import numpy as np
import pytest

from drbrt.conic import (
    AffExpr,
    ConicProgram,
    LAMBDA_MAX_DEFAULT,
    Status,
    SymExpr,
    congruence_map,
    pair_sym_map,
    quad_row,
    smat,
    svec_of,
    sym_embed,
    sym_place_scalar,
    sym_place_vector,
    verify_solution,
)


def test_svec_round_trip_and_quad_row():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 4))
    m = a + a.T
    assert np.allclose(smat(svec_of(m), 4), m)
    v = rng.standard_normal(4)
    assert quad_row(v) @ svec_of(m) == pytest.approx(float(v @ m @ v))


def test_congruence_and_pair_maps():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((3, 3))
    M = rng.standard_normal((3, 3))
    M = M + M.T
    assert np.allclose(congruence_map(A) @ svec_of(M), svec_of(A @ M @ A.T))
    B = rng.standard_normal((3, 2))
    U = rng.standard_normal((2, 3))
    expected = B @ U @ A.T + A @ U.T @ B.T
    assert np.allclose(pair_sym_map(B, A) @ U.reshape(-1), svec_of(expected))


@pytest.mark.parametrize("backend", ["clarabel", "scs"])
def test_eigenvalue_floor_example(backend):
    prog = ConicProgram("floor")
    X = prog.add_sym("X", 2)
    prog.add_eq(AffExpr.of_var(X) + AffExpr.constant(-svec_of(np.diag([1.0, 2.0]))))
    t = prog.add_scalar("t")
    lmi = SymExpr.from_sym_var(X) + SymExpr.scaled_identity(2, t, -1.0)
    prog.add_lmi(lmi)
    prog.maximize(AffExpr.of_var(t))
    sol = prog.solve(backend=backend)
    assert sol.status == Status.OPTIMAL
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    assert sol.value(t) == pytest.approx(1.0, abs=1e-6)


def test_min_norm_unconstrained():
    prog = ConicProgram("proj")
    x = prog.add_vector("x", 3)
    t = prog.add_scalar("t")
    c = np.array([1.0, -2.0, 0.5])
    prog.add_soc(AffExpr.of_var(t), AffExpr.of_var(x) + AffExpr.constant(-c))
    prog.minimize(AffExpr.of_var(t))
    sol = prog.solve()
    assert sol.status == Status.OPTIMAL
    assert np.allclose(sol.value(x), c, atol=1e-6)
    assert sol.objective == pytest.approx(0.0, abs=1e-6)


def test_infeasible_certificate():
    prog = ConicProgram("infeas")
    x = prog.add_scalar("x")
    prog.add_ineq(AffExpr.of_var(x, np.array([[-1.0]])) + AffExpr.constant([1.0]))  # x >= 1
    prog.add_ineq(AffExpr.of_var(x))  # x <= 0
    prog.minimize(AffExpr.of_var(x))
    assert prog.solve().status == Status.INFEASIBLE


def test_unbounded_and_lambda_cap():
    prog = ConicProgram("unbounded")
    x = prog.add_scalar("x")
    prog.maximize(AffExpr.of_var(x))
    assert prog.solve().status == Status.UNBOUNDED
    # eigenvalue-floor helper injects the configurable cap
    prog2 = ConicProgram("capped")
    X = prog2.add_sym("X", 2)
    prog2.maximize_lambda_min(X)
    sol = prog2.solve()
    assert sol.status == Status.OPTIMAL
    assert sol.objective == pytest.approx(LAMBDA_MAX_DEFAULT, rel=1e-4)


def test_objective_scaling_preserves_status_and_argmax():
    def build(scale):
        prog = ConicProgram()
        x = prog.add_vector("x", 2)
        # x inside a box, maximize scaled sum
        prog.add_ineq(AffExpr.of_var(x) + AffExpr.constant([-1.0, -2.0]))
        prog.add_ineq(AffExpr.of_var(x, -np.eye(2)))
        prog.maximize(AffExpr.of_var(x, scale * np.ones((1, 2))))
        return prog, x

    p1, x1 = build(1.0)
    p2, x2 = build(37.5)
    s1, s2 = p1.solve(), p2.solve()
    assert s1.status == s2.status == Status.OPTIMAL
    assert np.allclose(s1.value(x1), s2.value(x2), atol=1e-6)
    assert s2.objective == pytest.approx(37.5 * s1.objective, rel=1e-6)


def test_geomean_tower():
    prog = ConicProgram("gm")
    d = prog.add_vector("d", 3)
    t = prog.add_scalar("t")
    prog.add_eq(AffExpr.of_var(d) + AffExpr.constant([-2.0, -8.0, -4.0]))
    prog.add_geomean(AffExpr.of_var(t), [AffExpr.of_var(d, np.eye(3)[i:i + 1]) for i in range(3)])
    prog.maximize(AffExpr.of_var(t))
    sol = prog.solve()
    assert sol.status == Status.OPTIMAL
    assert sol.objective == pytest.approx((2.0 * 8.0 * 4.0) ** (1.0 / 3.0), rel=1e-6)


def test_verify_solution_hand_built_and_perturbed():
    prog = ConicProgram("verify")
    X = prog.add_sym("X", 2)
    t = prog.add_scalar("t")
    prog.add_lmi(SymExpr.from_sym_var(X) + SymExpr.scaled_identity(2, t, -1.0), name="floor")
    prog.add_ineq(AffExpr.of_var(t, np.array([[1.0]])) + AffExpr.constant([-0.5]), name="t_ub")
    # hand-built feasible point: X = I, t = 0.5
    x = np.zeros(4)
    x[X.offset:X.offset + 3] = svec_of(np.eye(2))
    x[t.offset] = 0.5
    report = verify_solution(prog, x, 1e-9)
    assert report.ok
    assert report.min_lmi_eig == pytest.approx(0.5, abs=1e-12)
    x_bad = x.copy()
    x_bad[t.offset] = 0.5 + 1e-3
    report = verify_solution(prog, x_bad, 1e-6)
    assert not report.ok
    assert any(name == "t_ub" for name, _ in report.failures)


def test_verify_lmi_eig_matches_oracle():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((3, 3))
    m = a @ a.T + 0.3 * np.eye(3)
    prog = ConicProgram()
    X = prog.add_sym("X", 3)
    prog.add_lmi(SymExpr.from_sym_var(X), name="psd")
    x = np.zeros(6)
    x[:6] = svec_of(m)
    report = verify_solution(prog, x, 1e-9)
    eigs = np.linalg.eigvalsh(m)
    expected = float(eigs[0]) / max(abs(float(eigs[-1])), 1.0)  # scale-normalized
    assert report.min_lmi_eig == pytest.approx(expected, abs=1e-9)


def test_embedding_helpers():
    prog = ConicProgram()
    s = prog.add_vector("s", 2)
    sigma = prog.add_scalar("sig")
    # build [[sig, s'],[s, I]] 3x3 and check values
    e = SymExpr.from_const(np.diag([0.0, 1.0, 1.0])) + \
        sym_place_scalar(3, AffExpr.of_var(sigma), 0) + \
        sym_place_vector(3, AffExpr.of_var(s), 1, 0)
    x = np.array([0.3, -0.7, 2.0])
    m = e.matrix_value(np.concatenate([x]))
    assert m[0, 0] == pytest.approx(2.0)
    assert np.allclose(m[1:, 0], [0.3, -0.7])
    assert np.allclose(m[1:, 1:], np.eye(2))
    small = SymExpr.from_const(np.array([[5.0]]))
    big = sym_embed(3, small, 2)
    assert big.matrix_value(x)[2, 2] == 5.0


def test_dump_listing():
    prog = ConicProgram("demo")
    X = prog.add_sym("X", 2)
    prog.maximize_lambda_min(X)
    text = prog.dump()
    assert "demo" in text and "lmi" in text and "max" in text


def test_solver_tol_env_override(monkeypatch):
    from drbrt import conic

    monkeypatch.setenv("DRBRT_SOLVER_TOL", "1e-6")
    assert conic.solver_tolerance() == 1e-6
    monkeypatch.delenv("DRBRT_SOLVER_TOL")
    assert conic.solver_tolerance() == conic.DEFAULT_TOLERANCE
