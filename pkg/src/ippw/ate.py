"""Estimators and confidence intervals for the sample average treatment effect.

Three point estimators share one variance/CI pipeline:

* ``diff_in_means`` - the post-matching difference-in-means, which implicitly
  assumes uniform within-set assignment probabilities;
* ``ippw_estimate`` - the same per-set contrasts re-weighted by inverse
  post-matching probabilities, debiasing inexact matching;
* ``fpw_estimate`` - the no-matching finite-population weighting baseline.

The variance estimator for the matched estimators is the quadratic form
S^2(Q) = I^-2 y W (Id - H_Q) W y' with y_i the per-set estimate inflated by
1/sqrt(1 - h_Qii), W = diag(I n_i / N), and H_Q the hat matrix of a caller
chosen I x L design matrix Q. It is conservative in expectation for any fixed
Q. The hat matrix is evaluated through a QR factorization; the inverse of
Q'Q is never formed.
"""
from dataclasses import dataclass, field

import numpy as np

from .design import require_valid_design, set_weights
from .errors import DataError, LeverageError, RankError
from .stats import normal_quantile

Q_KINDS = ("unit", "intercept_weights", "intercept_covmeans")
ESTIMATOR_TAGS = ("diff_in_means", "ippw", "ippw_oracle", "fpw")
_LEVERAGE_TOL = 1e-10


@dataclass(frozen=True)
class DesignMatrixSpec:
    """Choice of the auxiliary matrix Q used by the variance estimator."""

    kind: str = "unit"
    covariates: tuple = None  # column subset for intercept_covmeans

    def __post_init__(self):
        if self.kind not in Q_KINDS:
            raise ValueError(f"unknown design matrix kind {self.kind!r}")


@dataclass(frozen=True)
class AteResult:
    estimate: float
    variance: float
    ci_lower: float
    ci_upper: float
    alpha: float
    estimator_tag: str
    q_spec: str = "unit"
    prob_source: str = None

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")
        if not self.ci_lower <= self.estimate <= self.ci_upper:
            raise ValueError("confidence interval must bracket the estimate")

    def to_dict(self):
        return {
            "estimator": self.estimator_tag,
            "estimate": self.estimate,
            "variance": self.variance,
            "ci": [self.ci_lower, self.ci_upper],
            "alpha": self.alpha,
            "q_spec": self.q_spec,
            "prob_source": self.prob_source,
        }


def diff_in_means(ds):
    """Per-set contrasts lambda_i and their n_i/N-weighted aggregate.

    lambda_i = sum_j Z_ij Y_ij / m_i - sum_j (1-Z_ij) Y_ij / (n_i - m_i).
    """
    require_valid_design(ds)
    lam_i = np.empty(ds.I)
    for k, s in enumerate(ds.sets):
        z, y = ds.z[s.units], ds.y[s.units]
        lam_i[k] = y[z == 1].sum() / s.m - y[z == 0].sum() / (s.n - s.m)
    return lam_i, float(np.sum(ds.n_i / ds.N * lam_i))


def ippw_estimate(ds, probs):
    """Inverse post-matching probability weighted per-set estimates.

    lambda_i = n_i^-1 sum_j (Z_ij Y_ij / p_ij - (1-Z_ij) Y_ij / (1-p_ij)).
    With p_ij = m_i/n_i this reduces exactly to ``diff_in_means``.
    """
    require_valid_design(ds)
    p = probs.p
    if p.shape != ds.z.shape:
        raise DataError("probability vector is not aligned with the dataset")
    z = ds.z.astype(float)
    terms = z * ds.y / p - (1.0 - z) * ds.y / (1.0 - p)
    lam_i = np.empty(ds.I)
    for k, s in enumerate(ds.sets):
        lam_i[k] = np.sum(terms[s.units]) / s.n
    return lam_i, float(np.sum(ds.n_i / ds.N * lam_i))


def fpw_estimate(z, y, e_hat, alpha=0.05):
    """Finite-population weighting estimator on an unmatched sample.

    lambda_W = N^-1 sum_n (Y_n Z_n / e_n - Y_n (1-Z_n) / (1-e_n)). The
    variance is the score-based sandwich N^-2 sum psi_n^2 with
    psi_n = Y_n Z_n/e_n - Y_n(1-Z_n)/(1-e_n) - lambda_W, treating the scores
    as fixed; callers should clamp e_hat beforehand.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    e = np.asarray(e_hat, dtype=float)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise DataError("fpw requires propensity scores strictly in (0, 1)")
    n = len(y)
    contrib = y * z / e - y * (1.0 - z) / (1.0 - e)
    est = float(np.sum(contrib)) / n
    s2 = float(np.sum((contrib - est) ** 2)) / n ** 2
    return confidence_interval(est, s2, alpha, estimator_tag="fpw",
                               q_spec="sandwich", prob_source="plugin")


def build_design_matrix(ds, spec):
    """Construct the I x L matrix Q for the variance estimator.

    unit -> all-ones column; intercept_weights -> (1, w_i);
    intercept_covmeans -> (1, xbar_1, ..., xbar_K) with within-set covariate
    means. Raises RankError naming an offending column when Q is rank
    deficient (e.g. equal set sizes make the weights column collinear with
    the intercept).
    """
    require_valid_design(ds)
    ones = np.ones((ds.I, 1))
    if spec.kind == "unit":
        q = ones
        names = ["intercept"]
    elif spec.kind == "intercept_weights":
        q = np.column_stack([ones, set_weights(ds)])
        names = ["intercept", "weights"]
    else:
        cols = spec.covariates
        if cols is None:
            cols = tuple(range(ds.x.shape[1]))
        if len(cols) >= ds.I - 1:
            raise RankError(
                f"covmeans needs K < I - 1 (K={len(cols)}, I={ds.I})")
        means = np.empty((ds.I, len(cols)))
        for k, s in enumerate(ds.sets):
            means[k] = ds.x[s.units][:, cols].mean(axis=0)
        q = np.column_stack([ones, means])
        names = ["intercept"] + [ds.covariate_names[c] for c in cols]
    if q.shape[1] >= ds.I:
        raise RankError(f"Q must have fewer columns than sets "
                        f"(L={q.shape[1]}, I={ds.I})")
    # Locate the first column that fails to enlarge the column space.
    rank = np.linalg.matrix_rank(q)
    if rank < q.shape[1]:
        for j in range(1, q.shape[1] + 1):
            if np.linalg.matrix_rank(q[:, :j]) < j:
                raise RankError(f"design matrix is rank deficient: "
                                f"column '{names[j - 1]}' adds no rank")
    return q


def hat_diagonal(q):
    """Diagonal of H_Q = Q (Q'Q)^-1 Q' via the thin QR factorization."""
    qhat, _ = np.linalg.qr(q)
    return np.sum(qhat * qhat, axis=1), qhat


def variance_estimator_Q(lam_i, ds, q):
    """Conservative variance S^2(Q) for the weighted per-set aggregate."""
    lam_i = np.asarray(lam_i, dtype=float)
    if lam_i.shape != (ds.I,):
        raise DataError("per-set estimates are not aligned with the dataset")
    h, qhat = hat_diagonal(q)
    if np.any(h >= 1.0 - _LEVERAGE_TOL):
        worst = int(np.argmax(h))
        raise LeverageError(
            f"leverage h_{worst} = {h[worst]:.12f} too close to 1")
    w = set_weights(ds)
    v = w * lam_i / np.sqrt(1.0 - h)
    quad = float(v @ v - (qhat.T @ v) @ (qhat.T @ v))
    return max(quad, 0.0) / ds.I ** 2


def confidence_interval(estimate, s2, alpha, estimator_tag="ippw",
                        q_spec="unit", prob_source=None):
    """Normal-quantile interval: estimate +/- z_{1-alpha/2} sqrt(s2)."""
    if s2 < 0:
        raise ValueError("variance must be nonnegative")
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    half = normal_quantile(1.0 - alpha / 2.0) * float(np.sqrt(s2))
    return AteResult(estimate=float(estimate), variance=float(s2),
                     ci_lower=float(estimate - half),
                     ci_upper=float(estimate + half),
                     alpha=alpha, estimator_tag=estimator_tag,
                     q_spec=q_spec, prob_source=prob_source)


def analyze(ds, probs=None, q_spec=None, alpha=0.05, estimator_tag=None):
    """One-call pipeline: per-set estimates, S^2(Q), and the interval.

    With ``probs`` None the conventional difference-in-means path is used;
    otherwise the IPPW path with the supplied probabilities.
    """
    q_spec = q_spec or DesignMatrixSpec("unit")
    if probs is None:
        lam_i, est = diff_in_means(ds)
        tag = estimator_tag or "diff_in_means"
        source = "uniform"
    else:
        lam_i, est = ippw_estimate(ds, probs)
        tag = estimator_tag or "ippw"
        source = probs.source
    q = build_design_matrix(ds, q_spec)
    s2 = variance_estimator_Q(lam_i, ds, q)
    return confidence_interval(est, s2, alpha, estimator_tag=tag,
                               q_spec=q_spec.kind, prob_source=source)
