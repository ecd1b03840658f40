"""Post-matching treatment-assignment probabilities.

Within a matched set whose composition is fixed, the conditional probability
that unit j carries the treatment is a function of the units' propensity
scores e_j. For a set with a single treated unit,

    p_j = e_j * prod_{k != j} (1 - e_k) / sum_j' e_j' * prod_{k != j'} (1 - e_k),

which algebraically reduces to the odds-softmax p_j = odds_j / sum(odds),
odds_j = e_j / (1 - e_j). The single-control case is the mirror image with
odds inverted. The softmax-of-logits form is used for every set size: it is
exactly the product formula computed in log space, so it cannot underflow
even for extreme scores.

``enumerate_assignment_dist`` is the deliberately independent brute-force
check: it conditions independent Bernoulli(e_j) draws on the treated count by
direct enumeration, without any of the algebra above.
"""
import itertools
from dataclasses import dataclass

import numpy as np

from .design import require_valid_design
from .errors import DataError, DesignError

SOURCES = ("oracle", "plugin", "uniform", "regularized")
_SUM_TOL = 1e-10
# Output floor keeping probabilities representable inside (0, 1): with very
# extreme scores the exact p is closer to 0 or 1 than one double ulp. Far
# below any statistically meaningful scale and inactive for moderate scores.
_P_FLOOR = 1e-15


@dataclass(frozen=True)
class AssignmentProbs:
    """Per-unit post-matching probabilities aligned with a MatchedDataset."""

    p: np.ndarray
    source: str

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise DataError("assignment probabilities must lie strictly in (0, 1)")
        if self.source not in SOURCES:
            raise ValueError(f"unknown probability source {self.source!r}")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class SetAssignmentDistribution:
    """All within-set assignments with their conditional probabilities."""

    assignments: np.ndarray  # (n_assignments, n) binary matrix
    probs: np.ndarray

    def marginals(self):
        """Per-unit treatment probabilities; sum to the treated count."""
        return self.probs @ self.assignments


def _check_scores(e):
    e = np.asarray(e, dtype=float)
    if e.ndim != 1 or len(e) < 2:
        raise DataError("need a vector of at least two propensity scores")
    if np.any(~np.isfinite(e)) or np.any(e <= 0.0) or np.any(e >= 1.0):
        raise DataError("propensity scores must lie strictly in (0, 1)")
    return e


def _odds_softmax(logits):
    shifted = logits - logits.max()
    w = np.exp(shifted)
    return w / w.sum()


def probs_one_treated(e):
    """p_j for a set with exactly one treated unit; sums to 1."""
    e = _check_scores(e)
    p = _odds_softmax(np.log(e) - np.log1p(-e))
    return np.clip(p, _P_FLOOR, 1.0 - _P_FLOOR)


def probs_one_control(e):
    """p_j for a set with exactly one control unit; sums to n - 1."""
    e = _check_scores(e)
    p = 1.0 - _odds_softmax(np.log1p(-e) - np.log(e))
    return np.clip(p, _P_FLOOR, 1.0 - _P_FLOOR)


def post_match_probs(ds, e, source="plugin"):
    """Assignment probabilities for every unit of a matched dataset.

    Pairs dispatch through the one-treated formula; the one-control formula
    agrees with it on pairs, so either choice is consistent.
    """
    require_valid_design(ds)
    e = np.asarray(e, dtype=float)
    if e.shape != ds.z.shape:
        raise DataError("propensity vector is not aligned with the dataset")
    p = np.empty(ds.N, dtype=float)
    for s in ds.sets:
        if s.m == 1:
            p[s.units] = probs_one_treated(e[s.units])
        else:  # n - m == 1, guaranteed by require_valid_design
            p[s.units] = probs_one_control(e[s.units])
    return AssignmentProbs(p=p, source=source)


def uniform_probs(ds):
    """The exact-matching special case p_ij = m_i / n_i."""
    require_valid_design(ds)
    p = np.empty(ds.N, dtype=float)
    for s in ds.sets:
        p[s.units] = s.m / s.n
    return AssignmentProbs(p=p, source="uniform")


def enumerate_assignment_dist(e, m):
    """Distribution of a set's assignment vector by explicit enumeration.

    The probability of each binary vector z with sum(z) = m is the product
    prod_j e_j^z_j (1-e_j)^(1-z_j), renormalized over the admissible vectors.
    Independent of the closed-form marginal formulas by construction.
    """
    e = _check_scores(e)
    n = len(e)
    if n > 20:
        raise DataError(f"enumeration guard: set size {n} exceeds 20")
    if not 1 <= m <= n - 1:
        raise DesignError(f"treated count {m} invalid for set size {n}")
    assignments = np.zeros((0, n))
    weights = []
    rows = []
    for ones in itertools.combinations(range(n), m):
        z = np.zeros(n)
        z[list(ones)] = 1.0
        rows.append(z)
        weights.append(np.prod(np.where(z == 1.0, e, 1.0 - e)))
    assignments = np.array(rows)
    weights = np.array(weights)
    probs = weights / weights.sum()
    return SetAssignmentDistribution(assignments=assignments, probs=probs)


def check_set_sums(probs, ds, tol=_SUM_TOL):
    """Verify sum_j p_ij = m_i per set; raises on violation."""
    for s in ds.sets:
        total = float(np.sum(probs.p[s.units]))
        if abs(total - s.m) > tol:
            raise DataError(
                f"set '{s.label}': probabilities sum to {total}, expected {s.m}")


def regularize_probs(probs, ds, gamma=0.1):
    """Replace whole-set probabilities by m_i/n_i where any p is extreme.

    A set is reset exactly when min_j p_ij <= gamma or max_j p_ij >= 1 - gamma;
    otherwise it is untouched. Idempotent: reset sets re-trigger the rule but
    are replaced by the same uniform values.
    """
    if not 0.0 < gamma < 0.5:
        raise ValueError(f"gamma must be in (0, 0.5), got {gamma}")
    p = probs.p.copy()
    for s in ds.sets:
        ps = p[s.units]
        if ps.min() <= gamma or ps.max() >= 1.0 - gamma:
            p[s.units] = s.m / s.n
    return AssignmentProbs(p=p, source="regularized")
