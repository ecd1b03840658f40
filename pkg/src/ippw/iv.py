"""Bias-corrected randomization inference for the effect ratio in matched
instrumental-variable studies.

The test statistic for H0: theta = theta0 is

    A(theta0) = I^-1 sum_i A_i(theta0),
    A_i(theta0) = sum_j [Z_ij/p_ij - (1-Z_ij)/(1-p_ij)] (Y_ij - theta0 D_ij),

with the empirical variance V^2(theta0) = [I(I-1)]^-1 sum_i (A_i - A)^2.
Because each A_i is affine in theta0, the confidence set
{theta: A(theta)^2 <= z^2 V^2(theta)} is the solution set of a quadratic
inequality and is classified in closed form: a bounded interval under a
strong instrument, the complement of an interval or the whole line under a
weak one. Non-interval shapes are reported as such, never forced into an
interval.
"""
import math
from dataclasses import dataclass

import numpy as np

from .design import require_valid_design
from .errors import DataError, WeakInstrumentError
from .stats import normal_quantile


@dataclass(frozen=True)
class ConfidenceSet:
    """Solution set of the quadratic test inversion.

    shape:
      interval    -> [lower, upper] (endpoints may be infinite only in the
                     knife-edge linear case)
      complement  -> (-inf, lower] union [upper, inf)
      whole_line  -> every theta is retained
      empty       -> nothing retained (numerically negative discriminant)
    """

    shape: str
    lower: float = float("nan")
    upper: float = float("nan")

    def __post_init__(self):
        if self.shape in ("interval", "complement") and not self.lower <= self.upper:
            raise ValueError("confidence set endpoints must be ordered")

    def contains(self, theta):
        if self.shape == "whole_line":
            return True
        if self.shape == "empty":
            return False
        if self.shape == "interval":
            return self.lower <= theta <= self.upper
        return theta <= self.lower or theta >= self.upper

    def length(self):
        """Interval length; infinite for unbounded shapes, nan when empty."""
        if self.shape == "interval":
            return self.upper - self.lower
        if self.shape == "empty":
            return float("nan")
        return float("inf")

    def to_dict(self):
        return {"shape": self.shape,
                "endpoints": [self.lower, self.upper]
                if self.shape in ("interval", "complement") else []}


@dataclass(frozen=True)
class EffectRatioResult:
    point_estimate: float
    confidence_set: ConfidenceSet
    alpha: float
    estimator_tag: str
    prob_source: str
    weak_iv_flag: bool

    def to_dict(self):
        return {
            "estimator": self.estimator_tag,
            "point_estimate": self.point_estimate,
            "confidence_set": self.confidence_set.to_dict(),
            "alpha": self.alpha,
            "prob_source": self.prob_source,
            "weak_iv_flag": self.weak_iv_flag,
        }


def _require_dose(ds):
    if ds.d is None:
        raise DataError("missing column 'd': IV analysis needs the treatment dose")


def ar_components(ds, probs):
    """Per-set weighted contrasts (a_i for Y, b_i for D).

    A_i(theta) = a_i - theta * b_i, so these two vectors carry everything
    the test statistic and its variance need at any theta.
    """
    _require_dose(ds)
    require_valid_design(ds)
    p = probs.p
    z = ds.z.astype(float)
    w = z / p - (1.0 - z) / (1.0 - p)
    wy, wd = w * ds.y, w * ds.d
    a_i = np.empty(ds.I)
    b_i = np.empty(ds.I)
    for k, s in enumerate(ds.sets):
        a_i[k] = np.sum(wy[s.units])
        b_i[k] = np.sum(wd[s.units])
    return a_i, b_i


def ar_statistic(ds, probs, theta0):
    """A(theta0) and the per-set contributions A_i(theta0)."""
    a_i, b_i = ar_components(ds, probs)
    stat_i = a_i - theta0 * b_i
    return float(stat_i.mean()), stat_i


def ar_variance(stat_i, stat):
    """V^2 = [I(I-1)]^-1 sum_i (A_i - A)^2; needs at least two sets."""
    stat_i = np.asarray(stat_i, dtype=float)
    n_sets = len(stat_i)
    if n_sets < 2:
        raise DataError("variance of the IV statistic needs at least 2 sets")
    return float(np.sum((stat_i - stat) ** 2)) / (n_sets * (n_sets - 1))


def bc_wald(ds, probs):
    """Bias-corrected Wald estimator: the root of A(theta) = 0.

    theta = sum_ij Y_ij (Z_ij - p_ij)/(p_ij(1-p_ij)) over the same sum with
    D. Raises WeakInstrumentError when the denominator vanishes.
    """
    a_i, b_i = ar_components(ds, probs)
    denom = float(np.sum(b_i))
    if denom == 0.0:
        raise WeakInstrumentError("zero denominator in the estimating equation")
    return float(np.sum(a_i)) / denom


def classical_wald(ds):
    """Classical post-matching Wald estimator (uniform-assignment weights).

    theta = sum_i n_i^2/(m_i(n_i-m_i)) sum_j (Z_ij - Zbar_i)(Y_ij - Ybar_i)
    over the same expression with D, using within-set observed means. This
    deliberately independent formula coincides with ``bc_wald`` under
    uniform probabilities m_i/n_i.
    """
    _require_dose(ds)
    require_valid_design(ds)
    num = 0.0
    den = 0.0
    for s in ds.sets:
        z = ds.z[s.units].astype(float)
        y = ds.y[s.units]
        d = ds.d[s.units]
        scale = s.n ** 2 / (s.m * (s.n - s.m))
        zc = z - z.mean()
        num += scale * float(np.sum(zc * (y - y.mean())))
        den += scale * float(np.sum(zc * (d - d.mean())))
    if den == 0.0:
        raise WeakInstrumentError("zero denominator in the classical Wald estimator")
    return num / den


def _classify_quadratic(qq, r, s):
    """Solution set of qq*t^2 - 2r*t + s <= 0."""
    if qq > 0.0:
        disc = r * r - qq * s
        if disc < 0.0:
            return ConfidenceSet(shape="empty")
        root = math.sqrt(disc)
        return ConfidenceSet(shape="interval",
                             lower=(r - root) / qq, upper=(r + root) / qq)
    if qq < 0.0:
        disc = r * r - qq * s
        if disc < 0.0:
            return ConfidenceSet(shape="whole_line")
        root = math.sqrt(disc)
        # concave: the inequality holds outside the roots
        return ConfidenceSet(shape="complement",
                             lower=(r + root) / qq, upper=(r - root) / qq)
    # knife edge: linear inequality -2r*t + s <= 0
    if r > 0.0:
        return ConfidenceSet(shape="interval", lower=s / (2.0 * r),
                             upper=float("inf"))
    if r < 0.0:
        return ConfidenceSet(shape="interval", lower=float("-inf"),
                             upper=s / (2.0 * r))
    return ConfidenceSet(shape="whole_line") if s <= 0.0 \
        else ConfidenceSet(shape="empty")


def effect_ratio_confidence_set(ds, probs, alpha=0.05, estimator_tag="bc_wald"):
    """Closed-form confidence set for the effect ratio.

    Writing A_i(theta) = a_i - theta b_i, the boundary condition
    A(theta)^2 = z^2 V^2(theta) is quadratic in theta with coefficients built
    from the means and centered second moments of (a_i, b_i).
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    a_i, b_i = ar_components(ds, probs)
    n_sets = len(a_i)
    if n_sets < 2:
        raise DataError("confidence set needs at least 2 matched sets")
    z = normal_quantile(1.0 - alpha / 2.0)
    abar, bbar = float(a_i.mean()), float(b_i.mean())
    c = z * z / (n_sets * (n_sets - 1))
    da, db = a_i - abar, b_i - bbar
    qq = bbar * bbar - c * float(np.sum(db * db))
    r = abar * bbar - c * float(np.sum(da * db))
    s = abar * abar - c * float(np.sum(da * da))
    cs = _classify_quadratic(qq, r, s)
    point = float(abar / bbar) if bbar != 0.0 else float("nan")
    weak = cs.shape != "interval" or not (math.isfinite(cs.lower)
                                          and math.isfinite(cs.upper))
    return EffectRatioResult(point_estimate=point, confidence_set=cs,
                             alpha=alpha, estimator_tag=estimator_tag,
                             prob_source=probs.source, weak_iv_flag=weak)


def grid_scan(ds, probs, alpha, grid_range, n_points=2001):
    """Direct membership evaluation of the confidence set on a grid.

    Evaluates |A(theta)| <= z V(theta) point by point through
    ``ar_statistic``/``ar_variance``; independent of the closed-form
    quadratic, so it cross-validates the classification.
    """
    lo, hi = grid_range
    if not lo < hi:
        raise ValueError("grid range must satisfy lo < hi")
    thetas = np.linspace(lo, hi, n_points)
    z = normal_quantile(1.0 - alpha / 2.0)
    a_i, b_i = ar_components(ds, probs)
    inside = np.empty(n_points, dtype=bool)
    for t, theta in enumerate(thetas):
        stat_i = a_i - theta * b_i
        stat = float(stat_i.mean())
        v2 = ar_variance(stat_i, stat)
        inside[t] = stat * stat <= z * z * v2
    return thetas, inside


def grid_agrees(result, ds, probs, alpha, grid_range, n_points=2001):
    """True when grid membership matches the closed-form set everywhere."""
    thetas, inside = grid_scan(ds, probs, alpha, grid_range, n_points)
    cs = result.confidence_set
    return all(cs.contains(t) == bool(m) for t, m in zip(thetas, inside))
