"""Propensity score learners and score regularization.

Two in-repo learners cover the plug-in strategy: a ridge-stabilized IRLS
logistic regression (deterministic, useful as a transparent baseline) and a
small gradient-boosted-trees classifier standing in for a heavyweight
external booster. Externally estimated scores enter through the ``e_hat``
CSV column instead; nothing here is required for that path.

The GBM is Newton boosting on the logistic loss with exact greedy splits on
midpoints between distinct feature values. Ties in split gain are broken
toward the lowest feature index, then the lowest threshold, which makes the
fit deterministic and invariant to row permutations of the training data.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DataError
from .stats import expit

LEARNERS = ("logistic", "gbm", "external")

_GBM_REG_LAMBDA = 1.0   # leaf ridge, as in standard boosting implementations
_MIN_LEAF_HESSIAN = 1e-6
_SEPARATION_ETA = 35.0  # |linear predictor| beyond this means separation
_RIDGE_FALLBACK = 1e-4


@dataclass(frozen=True)
class PropensityModelSpec:
    learner: str = "gbm"
    gbm_rounds: int = 100
    gbm_depth: int = 2
    gbm_eta: float = 0.1
    logistic_max_iter: int = 50
    ridge: float = 0.0
    clamp_rho: float = 0.1

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.gbm_rounds < 1 or self.gbm_depth < 1 or self.gbm_eta <= 0:
            raise ValueError("gbm hyperparameters must be positive")
        if self.logistic_max_iter < 1 or self.ridge < 0:
            raise ValueError("logistic hyperparameters must be positive")
        if not 0.0 < self.clamp_rho < 0.5:
            raise ValueError(f"clamp threshold must be in (0, 0.5), "
                             f"got {self.clamp_rho}")


def clamp_scores(e_hat, rho=0.1):
    """Truncate scores into [rho, 1-rho]; idempotent."""
    if not 0.0 < rho < 0.5:
        raise ValueError(f"clamp threshold must be in (0, 0.5), got {rho}")
    return np.clip(np.asarray(e_hat, dtype=float), rho, 1.0 - rho)


# ---------------------------------------------------------------------------
# logistic regression via IRLS
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticFit:
    beta: np.ndarray        # intercept first
    e_hat: np.ndarray
    deviance: float
    n_iter: int
    ridge: float            # penalty actually used (fallback may raise it)


def _deviance(eta, z):
    # 2 * sum(softplus(eta) - z*eta), softplus computed stably
    softplus = np.where(eta > 0, eta + np.log1p(np.exp(-np.abs(eta))),
                        np.log1p(np.exp(-np.abs(eta))))
    return 2.0 * float(np.sum(softplus - z * eta))


def logistic_regression(X, Z, spec=None):
    """Maximum-likelihood logistic fit with ridge fallback.

    IRLS with step halving; when the normal equations go singular or the fit
    separates, the ridge penalty is raised to a small positive value and the
    iteration restarts. Non-convergence raises ConvergenceError carrying the
    last deviance.
    """
    spec = spec or PropensityModelSpec(learner="logistic")
    X = np.asarray(X, dtype=float)
    z = np.asarray(Z, dtype=float)
    n, k = X.shape
    if n <= k:
        raise DataError(f"logistic fit needs N > K (N={n}, K={k})")
    if k and np.any(X.var(axis=0) == 0.0):
        const = int(np.argmin(X.var(axis=0)))
        raise DataError(f"covariate column {const} is constant "
                        "(duplicates the intercept)")
    a = np.column_stack([np.ones(n), X])
    penalty_mask = np.ones(k + 1)
    penalty_mask[0] = 0.0  # intercept unpenalized

    ridge = spec.ridge
    for _attempt in range(2):
        beta = np.zeros(k + 1)
        eta = a @ beta
        obj = _deviance(eta, z) + ridge * float(np.sum(penalty_mask * beta ** 2))
        failed = False
        for it in range(1, spec.logistic_max_iter + 1):
            mu = expit(eta)
            grad = a.T @ (mu - z) + ridge * penalty_mask * beta
            if np.max(np.abs(grad)) < 1e-9:
                return LogisticFit(beta=beta, e_hat=expit(a @ beta),
                                   deviance=_deviance(eta, z),
                                   n_iter=it, ridge=ridge)
            w = mu * (1.0 - mu)
            hess = (a * w[:, None]).T @ a + ridge * np.diag(penalty_mask)
            try:
                step = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                failed = True
                break
            # halve the step until the penalized deviance stops increasing
            scale = 1.0
            for _ in range(30):
                cand = beta + scale * step
                cand_eta = a @ cand
                cand_obj = (_deviance(cand_eta, z)
                            + ridge * float(np.sum(penalty_mask * cand ** 2)))
                if cand_obj <= obj + 1e-12:
                    break
                scale *= 0.5
            beta, eta, obj = cand, cand_eta, cand_obj
            if ridge == 0.0 and np.max(np.abs(eta)) > _SEPARATION_ETA:
                failed = True  # separation: the MLE is at infinity
                break
        if not failed:
            raise ConvergenceError(
                f"IRLS did not converge in {spec.logistic_max_iter} iterations",
                deviance=_deviance(eta, z))
        if ridge > 0.0:
            raise ConvergenceError(
                "IRLS failed even with ridge penalty", deviance=_deviance(eta, z))
        ridge = max(spec.ridge, _RIDGE_FALLBACK)
    raise AssertionError("unreachable")


def fit_logistic(X, Z, spec=None):
    """Fitted treatment probabilities from ``logistic_regression``."""
    return logistic_regression(X, Z, spec).e_hat


# ---------------------------------------------------------------------------
# gradient boosted trees, logistic loss
# ---------------------------------------------------------------------------

@dataclass
class _TreeNode:
    feature: int = -1          # -1 marks a leaf
    threshold: float = 0.0
    left: "_TreeNode" = None
    right: "_TreeNode" = None
    value: float = 0.0

    def predict(self, X):
        if self.feature < 0:
            return np.full(len(X), self.value)
        out = np.empty(len(X))
        go_left = X[:, self.feature] <= self.threshold
        out[go_left] = self.left.predict(X[go_left])
        out[~go_left] = self.right.predict(X[~go_left])
        return out


def _leaf_value(g_sum, h_sum):
    return -g_sum / (h_sum + _GBM_REG_LAMBDA)


def _gain_term(g_sum, h_sum):
    return g_sum * g_sum / (h_sum + _GBM_REG_LAMBDA)


def _best_split(X, g, h):
    """Exact greedy split; returns (gain, feature, threshold) or None."""
    total = _gain_term(g.sum(), h.sum())
    best = None
    for feat in range(X.shape[1]):
        order = np.argsort(X[:, feat], kind="stable")
        xs = X[order, feat]
        gc = np.cumsum(g[order])
        hc = np.cumsum(h[order])
        # candidate cuts sit between consecutive distinct values
        boundary = np.nonzero(xs[:-1] < xs[1:])[0]
        if len(boundary) == 0:
            continue
        gl, hl = gc[boundary], hc[boundary]
        gr, hr = gc[-1] - gl, hc[-1] - hl
        ok = (hl >= _MIN_LEAF_HESSIAN) & (hr >= _MIN_LEAF_HESSIAN)
        if not ok.any():
            continue
        gains = _gain_term(gl, hl) + _gain_term(gr, hr) - total
        gains[~ok] = -np.inf
        pick = int(np.argmax(gains))  # first max: lowest threshold wins ties
        if gains[pick] > 0.0 and (best is None or gains[pick] > best[0]):
            thr = 0.5 * (xs[boundary[pick]] + xs[boundary[pick] + 1])
            best = (float(gains[pick]), feat, thr)
    return best


def _build_tree(X, g, h, depth):
    node = _TreeNode(value=_leaf_value(g.sum(), h.sum()))
    if depth == 0 or len(g) < 2:
        return node
    split = _best_split(X, g, h)
    if split is None:
        return node
    _, feat, thr = split
    mask = X[:, feat] <= thr
    node.feature = feat
    node.threshold = thr
    node.left = _build_tree(X[mask], g[mask], h[mask], depth - 1)
    node.right = _build_tree(X[~mask], g[~mask], h[~mask], depth - 1)
    return node


@dataclass
class GbmModel:
    """Fitted boosted-trees classifier; immutable once fitted."""

    base_score: float
    eta: float
    trees: list = field(default_factory=list)

    def decision_function(self, X):
        X = np.asarray(X, dtype=float)
        f = np.full(len(X), self.base_score)
        for tree in self.trees:
            f += self.eta * tree.predict(X)
        return f

    def predict_prob(self, X):
        return expit(self.decision_function(X))


def fit_gbm_model(X, Z, spec=None):
    """Boost shallow regression trees on the logistic loss."""
    spec = spec or PropensityModelSpec(learner="gbm")
    X = np.asarray(X, dtype=float)
    z = np.asarray(Z, dtype=float)
    rate = z.mean()
    if rate == 0.0 or rate == 1.0:
        raise DataError("labels are all zero or all one; nothing to boost")
    model = GbmModel(base_score=float(np.log(rate / (1.0 - rate))),
                     eta=spec.gbm_eta)
    f = np.full(len(z), model.base_score)
    for _ in range(spec.gbm_rounds):
        p = expit(f)
        g = p - z
        h = p * (1.0 - p)
        tree = _build_tree(X, g, h, spec.gbm_depth)
        model.trees.append(tree)
        f += spec.gbm_eta * tree.predict(X)
    return model


def fit_gbm(X, Z, spec=None):
    """In-sample fitted probabilities from ``fit_gbm_model``."""
    spec = spec or PropensityModelSpec(learner="gbm")
    model = fit_gbm_model(X, Z, spec)
    return model.predict_prob(X)


def fit_scores(X, Z, spec):
    """Dispatch on spec.learner; 'external' is rejected here by design."""
    if spec.learner == "logistic":
        return fit_logistic(X, Z, spec)
    if spec.learner == "gbm":
        return fit_gbm(X, Z, spec)
    raise DataError("learner 'external' expects scores in the e_hat column")
