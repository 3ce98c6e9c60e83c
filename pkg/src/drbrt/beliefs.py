"""Ambiguity-set families over Gaussian beliefs.

Five set families (ball with normal or chi-square quantile, fixed-mean
covariance cap, 2-Wasserstein, ellipsoid-of-means, and the ellipsoidal
generalization of the ball set), their membership tests, mean-space
projections, subset checks, and the extremal constructors for a Euclidean-ball
goal region.  All types are immutable values; operations are reentrant.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Ellipsoid,
    chi2_inverse_cdf,
    normal_inverse_cdf,
    psd_project,
    psd_sqrt,
    sym_eig_extremes,
)

MEMBERSHIP_TOL = 1e-9


class BallFlavor(str, enum.Enum):
    """Quantile used in a ball set: Phi is the normal inverse CDF, ChiSq the
    square root of the chi-square inverse CDF at the ambient dimension."""

    PHI = "phi"
    CHI_SQ = "chi_sq"


def ball_quantile(flavor: BallFlavor, epsilon: float, dim: int) -> float:
    if flavor == BallFlavor.PHI:
        return normal_inverse_cdf(1.0 - epsilon)
    return math.sqrt(chi2_inverse_cdf(1.0 - epsilon, dim))


@dataclass(frozen=True)
class GaussianBelief:
    """First/second moment pair of a state distribution."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = psd_project(self.cov, rel_tol=1e-8)
        if cov.shape[0] != mean.shape[0]:
            raise ValueError("belief mean/covariance dimension mismatch")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class BallSet:
    """Gaussians with ||mu - center|| + q * sqrt(lambda_max(Sigma)) <= radius."""

    center: np.ndarray
    radius: float
    epsilon: float
    flavor: BallFlavor = BallFlavor.PHI

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")
        if not (0.0 < self.epsilon < 0.5):
            raise ValueError("epsilon must lie in (0, 0.5)")
        object.__setattr__(self, "flavor", BallFlavor(self.flavor))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def quantile(self) -> float:
        return ball_quantile(self.flavor, self.epsilon, self.dim)


@dataclass(frozen=True)
class MaxCovSet:
    """Fixed mean with a covariance cap: mu = center, lambda_max(Sigma) <= lambda_min(cap)."""

    center: np.ndarray
    cov_cap: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        object.__setattr__(self, "cov_cap", psd_project(self.cov_cap, rel_tol=1e-8))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def cap_eig(self) -> float:
        return sym_eig_extremes(self.cov_cap)[0]


@dataclass(frozen=True)
class W2Set:
    """2-Wasserstein (Gelbrich) ball around a Gaussian centroid."""

    center: np.ndarray
    centroid_cov: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        object.__setattr__(self, "centroid_cov", psd_project(self.centroid_cov, rel_tol=1e-8))
        if self.radius < 0:
            raise ValueError("W2 radius must be nonnegative")

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass(frozen=True)
class EllSet:
    """Means inside an ellipsoid plus a covariance cap."""

    center: np.ndarray
    cov_cap: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        object.__setattr__(self, "cov_cap", psd_project(self.cov_cap, rel_tol=1e-8))
        object.__setattr__(self, "shape", psd_project(self.shape, rel_tol=1e-8))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def cap_eig(self) -> float:
        return sym_eig_extremes(self.cov_cap)[0]


@dataclass(frozen=True)
class EllBallSet:
    """Ellipsoidal union of ball sets: exists s in E(center, shape) with
    (mu, Sigma) in BallSet(s, radius)."""

    center: np.ndarray
    shape: np.ndarray
    radius: float
    epsilon: float
    flavor: BallFlavor = BallFlavor.PHI

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        object.__setattr__(self, "shape", psd_project(self.shape, rel_tol=1e-8))
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")
        if not (0.0 < self.epsilon < 0.5):
            raise ValueError("epsilon must lie in (0, 0.5)")
        object.__setattr__(self, "flavor", BallFlavor(self.flavor))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def quantile(self) -> float:
        return ball_quantile(self.flavor, self.epsilon, self.dim)


@dataclass(frozen=True)
class NodeSet:
    """Union of two component sets sharing a center (tree-node ambiguity set)."""

    primary: object  # BallSet or EllBallSet
    secondary: object  # MaxCovSet or EllSet

    def __post_init__(self):
        if not np.array_equal(np.asarray(self.primary.center), np.asarray(self.secondary.center)):
            raise ValueError("node-set components must share the center bit-exactly")
        if isinstance(self.primary, EllBallSet) and isinstance(self.secondary, EllSet):
            if not np.array_equal(self.primary.shape, self.secondary.shape):
                raise ValueError("ellipsoidal node-set components must share the shape")

    @property
    def center(self) -> np.ndarray:
        return self.primary.center


AmbiguitySet = (BallSet, MaxCovSet, W2Set, EllSet, EllBallSet, NodeSet)


# ---------------------------------------------------------------------------
# membership
# ---------------------------------------------------------------------------

def _lam_max(cov: np.ndarray) -> float:
    return max(sym_eig_extremes(cov)[1], 0.0)


def ellipsoid_point_distance(point: np.ndarray, ell: Ellipsoid, tol: float = 1e-12) -> float:
    """Euclidean distance from a point to a solid ellipsoid (0 if inside).

    Projection via the 1-D dual root-find on the single KKT multiplier.
    """
    y = np.asarray(point, dtype=float).reshape(-1) - ell.center
    w, v = np.linalg.eigh(ell.shape)
    w = np.clip(w, 0.0, None)
    z = v.T @ y
    active = w > 1e-14 * max(float(w[-1]), 1.0)
    # components in the null space cannot be matched: distance picks them up fully
    inside_val = float(np.sum(z[active] ** 2 / w[active])) if active.any() else 0.0
    null_dist_sq = float(np.sum(z[~active] ** 2))
    if inside_val <= 1.0 and null_dist_sq <= tol:
        return 0.0

    def residual(nu: float) -> float:
        s = w[active] / (w[active] + nu)
        return float(np.sum((z[active] * s) ** 2 / w[active])) - 1.0

    if not active.any() or float(np.sum(z[active] ** 2 / np.where(w[active] > 0, w[active], 1.0))) <= 1.0:
        # projection clamps null-space components only
        proj = z.copy()
        proj[~active] = 0.0
        return float(np.linalg.norm(z - proj))
    lo, hi = 0.0, 1.0
    while residual(hi) > 0.0:
        hi *= 2.0
        if hi > 1e18:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if residual(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    nu = 0.5 * (lo + hi)
    proj = np.where(active, z * (w / (w + nu)), 0.0)
    return float(np.linalg.norm(z - proj))


def w2_distance_sq(belief: GaussianBelief, center: np.ndarray, centroid_cov: np.ndarray) -> float:
    """Squared 2-Wasserstein distance between Gaussians (Gelbrich formula)."""
    mu_term = float(np.sum((belief.mean - center) ** 2))
    root = psd_sqrt(centroid_cov)
    cross = psd_sqrt(root @ belief.cov @ root)
    cov_term = float(np.trace(belief.cov) + np.trace(centroid_cov) - 2.0 * np.trace(cross))
    return mu_term + max(cov_term, 0.0)


def contains(ambiguity_set, belief: GaussianBelief, tol: float = MEMBERSHIP_TOL) -> bool:
    """Membership of a Gaussian belief in any of the set families."""
    if isinstance(ambiguity_set, NodeSet):
        return contains(ambiguity_set.primary, belief, tol) or contains(
            ambiguity_set.secondary, belief, tol
        )
    if ambiguity_set.dim != belief.dim:
        raise ValueError("ambiguity set and belief dimensions differ")
    if isinstance(ambiguity_set, BallSet):
        lhs = float(np.linalg.norm(belief.mean - ambiguity_set.center))
        lhs += ambiguity_set.quantile * math.sqrt(_lam_max(belief.cov))
        return lhs <= ambiguity_set.radius + tol
    if isinstance(ambiguity_set, MaxCovSet):
        if float(np.linalg.norm(belief.mean - ambiguity_set.center)) > tol:
            return False
        return _lam_max(belief.cov) <= ambiguity_set.cap_eig + tol
    if isinstance(ambiguity_set, W2Set):
        d2 = w2_distance_sq(belief, ambiguity_set.center, ambiguity_set.centroid_cov)
        return math.sqrt(d2) <= ambiguity_set.radius + tol
    if isinstance(ambiguity_set, EllSet):
        if _lam_max(belief.cov) > ambiguity_set.cap_eig + tol:
            return False
        dist = ellipsoid_point_distance(
            belief.mean, Ellipsoid(ambiguity_set.center, ambiguity_set.shape)
        )
        return dist <= tol
    if isinstance(ambiguity_set, EllBallSet):
        # witness s: nearest point of the ellipsoid to the belief mean
        dist = ellipsoid_point_distance(
            belief.mean, Ellipsoid(ambiguity_set.center, ambiguity_set.shape)
        )
        lhs = dist + ambiguity_set.quantile * math.sqrt(_lam_max(belief.cov))
        return lhs <= ambiguity_set.radius + tol
    raise TypeError(f"unsupported ambiguity set type {type(ambiguity_set)!r}")


# ---------------------------------------------------------------------------
# mean-space projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeanRegion:
    """Projection of an ambiguity set into mean space for a fixed covariance.

    Degenerate cases are balls (shape None) or plain ellipsoids (margin 0);
    the ellipsoidal ball set projects to an ellipsoid dilated by a margin.
    """

    empty: bool
    center: np.ndarray | None = None
    shape: np.ndarray | None = None
    margin: float = 0.0

    @staticmethod
    def empty_region() -> "MeanRegion":
        return MeanRegion(empty=True)

    @staticmethod
    def ball(center: np.ndarray, radius: float) -> "MeanRegion":
        return MeanRegion(empty=False, center=np.asarray(center, float), margin=float(radius))

    @staticmethod
    def ellipsoid(center: np.ndarray, shape: np.ndarray, margin: float = 0.0) -> "MeanRegion":
        return MeanRegion(
            empty=False, center=np.asarray(center, float), shape=psd_project(shape, 1e-8),
            margin=float(margin),
        )

    def contains_point(self, x: np.ndarray, tol: float = MEMBERSHIP_TOL) -> bool:
        if self.empty:
            return False
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.shape is None:
            return float(np.linalg.norm(x - self.center)) <= self.margin + tol
        dist = ellipsoid_point_distance(x, Ellipsoid(self.center, self.shape))
        return dist <= self.margin + tol


def mean_projection(ambiguity_set, sigma: np.ndarray) -> MeanRegion:
    """Set of means mu such that (mu, sigma) belongs to the ambiguity set."""
    sigma = psd_project(sigma, rel_tol=1e-8)
    lam = _lam_max(sigma)
    if isinstance(ambiguity_set, NodeSet):
        raise TypeError("project the node-set components individually")
    if isinstance(ambiguity_set, BallSet):
        r = ambiguity_set.radius - ambiguity_set.quantile * math.sqrt(lam)
        if r < 0.0:
            return MeanRegion.empty_region()
        return MeanRegion.ball(ambiguity_set.center, r)
    if isinstance(ambiguity_set, MaxCovSet):
        if lam <= ambiguity_set.cap_eig + MEMBERSHIP_TOL:
            return MeanRegion.ball(ambiguity_set.center, 0.0)
        return MeanRegion.empty_region()
    if isinstance(ambiguity_set, W2Set):
        belief = GaussianBelief(ambiguity_set.center, sigma)
        cov_term = w2_distance_sq(belief, ambiguity_set.center, ambiguity_set.centroid_cov)
        r_sq = ambiguity_set.radius ** 2 - cov_term
        if r_sq < 0.0:
            return MeanRegion.empty_region()
        return MeanRegion.ball(ambiguity_set.center, math.sqrt(r_sq))
    if isinstance(ambiguity_set, EllSet):
        if lam <= ambiguity_set.cap_eig + MEMBERSHIP_TOL:
            return MeanRegion.ellipsoid(ambiguity_set.center, ambiguity_set.shape)
        return MeanRegion.empty_region()
    if isinstance(ambiguity_set, EllBallSet):
        r = ambiguity_set.radius - ambiguity_set.quantile * math.sqrt(lam)
        if r < 0.0:
            return MeanRegion.empty_region()
        return MeanRegion.ellipsoid(ambiguity_set.center, ambiguity_set.shape, margin=r)
    raise TypeError(f"unsupported ambiguity set type {type(ambiguity_set)!r}")


def ball_subset(inner: BallSet, outer: BallSet, tol: float = 1e-12) -> bool:
    """Inclusion of ball sets with matching epsilon/flavor."""
    if inner.epsilon != outer.epsilon or inner.flavor != outer.flavor:
        raise ValueError("ball_subset requires matching epsilon and flavor")
    gap = float(np.linalg.norm(inner.center - outer.center))
    return gap + inner.radius <= outer.radius + tol


# ---------------------------------------------------------------------------
# extremal sets inside a Euclidean-ball goal region
# ---------------------------------------------------------------------------

def extremal_sets_in_goal(goal_center: np.ndarray, goal_radius: float, epsilon: float,
                          dim: int) -> tuple[W2Set, BallSet, BallSet]:
    """Maximal-radius W2, chi-square ball, and normal-quantile ball sets whose
    members all reach B(goal_center, goal_radius) with probability >= 1 - eps."""
    if goal_radius <= 0.0:
        raise ValueError("goal radius must be positive")
    goal_center = np.asarray(goal_center, dtype=float).reshape(-1)
    chi1 = math.sqrt(chi2_inverse_cdf(1.0 - epsilon, 1))
    chin = math.sqrt(chi2_inverse_cdf(1.0 - epsilon, dim))
    phi = normal_inverse_cdf(1.0 - epsilon)
    w2 = W2Set(goal_center, np.zeros((dim, dim)), goal_radius / chi1)
    ball_chi = BallSet(goal_center, goal_radius, epsilon, BallFlavor.CHI_SQ)
    ball_phi = BallSet(goal_center, phi * goal_radius / chin, epsilon, BallFlavor.PHI)
    return w2, ball_chi, ball_phi


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _mat(m: np.ndarray) -> list:
    return np.asarray(m, dtype=float).reshape(-1).tolist()  # row-major


def to_json(ambiguity_set) -> dict:
    """Tagged JSON object for any set family (matrices as row-major arrays)."""
    if isinstance(ambiguity_set, BallSet):
        return {
            "kind": "ball",
            "center": _mat(ambiguity_set.center),
            "radius": ambiguity_set.radius,
            "epsilon": ambiguity_set.epsilon,
            "flavor": ambiguity_set.flavor.value,
        }
    if isinstance(ambiguity_set, MaxCovSet):
        return {
            "kind": "max_cov",
            "center": _mat(ambiguity_set.center),
            "cov_cap": _mat(ambiguity_set.cov_cap),
        }
    if isinstance(ambiguity_set, W2Set):
        return {
            "kind": "w2",
            "center": _mat(ambiguity_set.center),
            "centroid_cov": _mat(ambiguity_set.centroid_cov),
            "radius": ambiguity_set.radius,
        }
    if isinstance(ambiguity_set, EllSet):
        return {
            "kind": "ell",
            "center": _mat(ambiguity_set.center),
            "cov_cap": _mat(ambiguity_set.cov_cap),
            "shape": _mat(ambiguity_set.shape),
        }
    if isinstance(ambiguity_set, EllBallSet):
        return {
            "kind": "ell_ball",
            "center": _mat(ambiguity_set.center),
            "shape": _mat(ambiguity_set.shape),
            "radius": ambiguity_set.radius,
            "epsilon": ambiguity_set.epsilon,
            "flavor": ambiguity_set.flavor.value,
        }
    if isinstance(ambiguity_set, NodeSet):
        return {
            "kind": "node",
            "primary": to_json(ambiguity_set.primary),
            "secondary": to_json(ambiguity_set.secondary),
        }
    raise TypeError(f"unsupported ambiguity set type {type(ambiguity_set)!r}")


def _unmat(values: list, dim: int) -> np.ndarray:
    return np.asarray(values, dtype=float).reshape(dim, dim)


def from_json(obj: dict):
    kind = obj["kind"]
    if kind == "ball":
        return BallSet(np.asarray(obj["center"]), obj["radius"], obj["epsilon"],
                       BallFlavor(obj["flavor"]))
    if kind == "max_cov":
        center = np.asarray(obj["center"], dtype=float)
        return MaxCovSet(center, _unmat(obj["cov_cap"], center.shape[0]))
    if kind == "w2":
        center = np.asarray(obj["center"], dtype=float)
        return W2Set(center, _unmat(obj["centroid_cov"], center.shape[0]), obj["radius"])
    if kind == "ell":
        center = np.asarray(obj["center"], dtype=float)
        n = center.shape[0]
        return EllSet(center, _unmat(obj["cov_cap"], n), _unmat(obj["shape"], n))
    if kind == "ell_ball":
        center = np.asarray(obj["center"], dtype=float)
        return EllBallSet(center, _unmat(obj["shape"], center.shape[0]), obj["radius"],
                          obj["epsilon"], BallFlavor(obj["flavor"]))
    if kind == "node":
        return NodeSet(from_json(obj["primary"]), from_json(obj["secondary"]))
    raise ValueError(f"unknown ambiguity set kind {kind!r}")
