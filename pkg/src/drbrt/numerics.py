"""Scalar quantiles, symmetric-matrix spectral utilities, and exact ellipsoid geometry.

Everything here is pure and reentrant.  Quantiles are computed by safeguarded
Newton/bisection on series-evaluated CDFs so results are verifiable against the
stated tolerances without external tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Eigenvalues of a PSD matrix may dip this far (relative to lambda_max) below
# zero before the matrix is rejected; anything in between is clipped to 0.
PSD_CLIP_REL = 1e-10

__all__ = [
    "normal_cdf",
    "normal_inverse_cdf",
    "chi2_cdf",
    "chi2_inverse_cdf",
    "sym_eig_extremes",
    "symmetrize",
    "psd_project",
    "psd_sqrt",
    "Ellipsoid",
    "ellipsoid_contained",
    "ellipsoid_support",
    "max_quadratic_over_unit_ball",
]


# ---------------------------------------------------------------------------
# scalar distributions
# ---------------------------------------------------------------------------

def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@lru_cache(maxsize=4096)
def normal_inverse_cdf(p: float) -> float:
    """Inverse standard normal CDF, |CDF(result) - p| <= 1e-12.

    Safeguarded Newton on erfc-evaluated CDF; antisymmetric reduction keeps
    full precision for p on either side of 1/2.
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"normal_inverse_cdf requires p in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -normal_inverse_cdf(1.0 - p)
    # p < 0.5 -> result < 0; bracket then Newton with bisection fallback.
    lo, hi = -40.0, 0.0
    x = -math.sqrt(max(2.0 * math.log(1.0 / (2.0 * p)), 0.25))
    for _ in range(200):
        f = normal_cdf(x) - p
        if abs(f) <= 1e-16:
            break
        if f > 0.0:
            hi = x
        else:
            lo = x
        d = _normal_pdf(x)
        step = f / d if d > 0.0 else 0.0
        x_new = x - step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * max(1.0, abs(x)):
            x = x_new
            break
        x = x_new
    return x


def _gammainc_lower_reg(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x), series + Lentz continued fraction."""
    if x < 0.0 or a <= 0.0:
        raise ValueError("gammainc requires a > 0, x >= 0")
    if x == 0.0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        # series expansion
        term = 1.0 / a
        total = term
        n = a
        for _ in range(10000):
            n += 1.0
            term *= x / n
            total += term
            if abs(term) < abs(total) * 1e-17:
                break
        return total * math.exp(-x + a * math.log(x) - lg)
    # continued fraction for Q(a, x), modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    q = math.exp(-x + a * math.log(x) - lg) * h
    return 1.0 - q


def chi2_cdf(x: float, n: int) -> float:
    """CDF of the chi-square distribution with n degrees of freedom."""
    if x <= 0.0:
        return 0.0
    return _gammainc_lower_reg(0.5 * n, 0.5 * x)


def _chi2_pdf(x: float, n: int) -> float:
    if x <= 0.0:
        return 0.0
    a = 0.5 * n
    return math.exp((a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a))


@lru_cache(maxsize=4096)
def chi2_inverse_cdf(p: float, n: int) -> float:
    """Inverse chi-square CDF; regularized gamma of the result matches p within 1e-10."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"chi2_inverse_cdf requires p in (0, 1), got {p}")
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ValueError(f"chi2_inverse_cdf requires integer dof n >= 1, got {n}")
    n = int(n)
    lo, hi = 0.0, float(n) + 10.0
    while chi2_cdf(hi, n) < p:
        hi *= 2.0
        if hi > 1e9:
            raise ValueError("chi2_inverse_cdf bracket expansion failed")
    x = float(n) * (1.0 - 2.0 / (9.0 * n) + normal_inverse_cdf(p) * math.sqrt(2.0 / (9.0 * n))) ** 3
    x = min(max(x, 1e-12), hi)
    for _ in range(200):
        f = chi2_cdf(x, n) - p
        if abs(f) <= 1e-15:
            break
        if f > 0.0:
            hi = x
        else:
            lo = x
        d = _chi2_pdf(x, n)
        x_new = x - f / d if d > 0.0 else 0.5 * (lo + hi)
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * max(1.0, abs(x)):
            x = x_new
            break
        x = x_new
    return x


# ---------------------------------------------------------------------------
# symmetric matrices
# ---------------------------------------------------------------------------

def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _check_symmetric(m: np.ndarray, rel_tol: float) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.abs(m).max(), 1.0) if m.size else 1.0
    if np.abs(m - m.T).max() > rel_tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return symmetrize(m)


def sym_eig_extremes(m: np.ndarray, rel_tol: float = 1e-8) -> tuple[float, float]:
    """Extreme eigenvalues (min, max) of a symmetric matrix; rejects asymmetric input."""
    m = _check_symmetric(m, rel_tol)
    w = np.linalg.eigvalsh(m)
    return float(w[0]), float(w[-1])


def psd_project(m: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Symmetrize and clip slightly negative eigenvalues to zero.

    Eigenvalues below -PSD_CLIP_REL * lambda_max are an error, not noise.
    """
    m = _check_symmetric(m, max(rel_tol, 1e-12))
    w, v = np.linalg.eigh(m)
    lam_max = max(float(w[-1]), 0.0)
    floor = -PSD_CLIP_REL * max(lam_max, 1.0)
    if w[0] < floor:
        raise ValueError(f"matrix is not PSD: min eigenvalue {w[0]:.3e} below clip floor {floor:.3e}")
    w = np.clip(w, 0.0, None)
    return symmetrize((v * w) @ v.T)


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition (negative noise clipped)."""
    m = psd_project(m)
    w, v = np.linalg.eigh(m)
    return symmetrize((v * np.sqrt(np.clip(w, 0.0, None))) @ v.T)


# ---------------------------------------------------------------------------
# ellipsoids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipsoid:
    """Solid ellipsoid {x : (x - center)' shape^{-1} (x - center) <= 1}, shape PSD."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(-1)
        shape = psd_project(self.shape)
        if shape.shape[0] != center.shape[0]:
            raise ValueError("ellipsoid center/shape dimension mismatch")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def contains_point(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        d = np.asarray(x, dtype=float).reshape(-1) - self.center
        w, v = np.linalg.eigh(self.shape)
        z = v.T @ d
        val = 0.0
        for zi, wi in zip(z, w):
            if wi <= PSD_CLIP_REL * max(w[-1], 1.0):
                if abs(zi) > tol * max(1.0, np.linalg.norm(self.center)):
                    return False
            else:
                val += zi * zi / wi
        return val <= 1.0 + tol


def max_quadratic_over_unit_ball(M: np.ndarray, g: np.ndarray, c: float,
                                 tol: float = 1e-12) -> float:
    """Exact max of z'Mz + 2 g'z + c over ||z|| <= 1, M symmetric PSD.

    The maximizer lies on the boundary; the dual stationarity condition
    (sigma I - M) z = g has a unique multiplier sigma >= lambda_max(M) with
    ||z(sigma)|| = 1, found by scalar search (hard case handled by padding
    with a top-eigenvector component).
    """
    M = symmetrize(np.asarray(M, dtype=float))
    g = np.asarray(g, dtype=float).reshape(-1)
    w, v = np.linalg.eigh(M)
    gt = v.T @ g
    lam_max = float(w[-1])
    g_norm = float(np.linalg.norm(gt))
    if lam_max <= tol and g_norm <= tol:
        return float(c)

    def z_norm_sq(sigma: float) -> float:
        return float(np.sum((gt / (sigma - w)) ** 2))

    hi = lam_max + g_norm + tol
    lo = lam_max
    if g_norm <= tol:
        z = v[:, -1].copy()
    elif z_norm_sq(lam_max + max(1e-14, 1e-14 * max(1.0, lam_max))) < 1.0:
        # hard case: top-eigenspace component of g vanishes; fill with eigvector
        sigma = lam_max
        denom = sigma - w
        coeff = np.where(np.abs(denom) > 1e-14 * max(1.0, lam_max), gt / np.where(denom == 0.0, 1.0, denom), 0.0)
        rem = max(0.0, 1.0 - float(np.sum(coeff ** 2)))
        coeff[-1] += math.sqrt(rem)
        z = v @ coeff
    else:
        while z_norm_sq(hi) > 1.0:
            hi = lam_max + 2.0 * (hi - lam_max)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid == lo or mid == hi:
                break
            if z_norm_sq(mid) > 1.0:
                lo = mid
            else:
                hi = mid
        sigma = hi
        z = v @ (gt / (sigma - w))
        nz = np.linalg.norm(z)
        if nz > 0:
            z = z / nz
    return float(z @ M @ z + 2.0 * g @ z + c)


def ellipsoid_support(e: Ellipsoid, direction: np.ndarray) -> float:
    """Support function max_{x in e} d'x."""
    d = np.asarray(direction, dtype=float).reshape(-1)
    return float(d @ e.center + math.sqrt(max(0.0, float(d @ e.shape @ d))))


def ellipsoid_contained(inner: Ellipsoid, outer: Ellipsoid, tol: float = 1e-9) -> bool:
    """Exact containment check: every point of `inner` lies in `outer`.

    Maximizes the outer quadratic over the inner set (scalar search over the
    S-procedure multiplier); containment iff the max is <= 1 + tol.  The
    outer shape must be positive definite; the inner may be singular.
    """
    if inner.dim != outer.dim:
        raise ValueError("ellipsoid dimension mismatch")
    w_out, v_out = np.linalg.eigh(outer.shape)
    if w_out[-1] <= 0.0 or w_out[0] <= PSD_CLIP_REL * float(w_out[-1]):
        raise ValueError("outer ellipsoid shape must be positive definite")
    Q = symmetrize((v_out / w_out) @ v_out.T)
    E = psd_sqrt(inner.shape)
    d = inner.center - outer.center
    M = symmetrize(E @ Q @ E)
    g = E @ (Q @ d)
    c = float(d @ Q @ d)
    return max_quadratic_over_unit_ball(M, g, c) <= 1.0 + tol
