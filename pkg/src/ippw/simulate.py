"""Monte-Carlo harness for the synthetic matched-study scenarios.

Each replication generates a fresh pre-matching sample, fits propensity
scores, builds a full matching, and keeps the dataset only if it passes the
covariate balance gate (every |post-matching SMD| below the threshold);
rejected datasets are regenerated from the next substream. Estimators are
then scored against the replication's own finite-population truth.

Randomness comes from counter-based Philox streams keyed by
(seed, replication, attempt, stage), so every replication is reproducible in
isolation and results are independent of worker count and execution order.

Treatment assignment models for the binary indicator (treatment or IV):

    model 1: logit pr(Z=1|x) = f(x) + eps,  eps ~ N(0,1)
    model 2: Z = 1{f(x) > eps},             eps ~ N(0,1)

Model 2's oracle propensity is Phi(f(x)). Model 1 mixes the logistic link
over the latent noise, so the oracle is E_eps[expit(f(x) + eps)], which has
no closed form and is integrated by 64-node Gauss-Hermite quadrature
(validated against large Monte-Carlo in the tests).
"""
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ate import DesignMatrixSpec, analyze, fpw_estimate
from .design import balance_table
from .errors import InfeasibleMatchError
from .iv import bc_wald, classical_wald, effect_ratio_confidence_set
from .matching import MatchSpec, build_matched_dataset, full_match_dp
from .probabilities import post_match_probs, regularize_probs, uniform_probs
from .propensity import PropensityModelSpec, clamp_scores, fit_scores
from .stats import expit, normal_cdf

ATE_ESTIMATORS = ("fpw", "diff_in_means", "ippw", "ippw_oracle")
IV_ESTIMATORS = ("wald", "bc_wald", "bc_wald_oracle")

# substream stages
_COVARIATES, _TREATMENT, _OUTCOME, _CONFOUNDERS, _DOSE = range(5)

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)
_LAPLACE_SCALE = math.sqrt(2.0) / 2.0
# Cholesky factor of the (u_d, u_y) covariance [[1, .8], [.8, 1]]
_CONFOUNDER_CHOL = np.array([[1.0, 0.0], [0.8, 0.6]])


def substream(seed, rep, attempt=0, stage=0):
    """Philox generator keyed by (seed, rep, attempt, stage)."""
    if not 0 <= attempt < 1 << 16:
        raise ValueError("attempt counter out of range")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF,
                    (rep << 24) | (attempt << 8) | stage], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ScenarioConfig:
    study: str = "ate"            # ate | iv
    model: int = 1                # treatment model, 1 or 2
    n_units: int = 400
    reps: int = 1000
    seed: int = 0
    caliper_on: bool = False
    caliper_scale: float = 0.2    # caliper = scale * SD(e_hat) when on
    balance_threshold: float = 0.2
    max_set_size: int = 8
    alpha: float = 0.05
    gamma: float = 0.1            # plug-in probability regularization
    clamp_rho: float = 0.1        # fpw score clamp
    estimators: tuple = None
    learner: PropensityModelSpec = field(
        default_factory=lambda: PropensityModelSpec(learner="gbm"))
    workers: int = 1
    max_attempts: int = 100       # balance-gate regenerations per replication

    def __post_init__(self):
        if self.study not in ("ate", "iv"):
            raise ValueError(f"unknown study {self.study!r}")
        if self.model not in (1, 2):
            raise ValueError(f"treatment model must be 1 or 2, got {self.model}")
        if self.n_units < 20:
            raise ValueError("n_units must be at least 20")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.estimators is None:
            object.__setattr__(
                self, "estimators",
                ATE_ESTIMATORS if self.study == "ate" else IV_ESTIMATORS)
        known = ATE_ESTIMATORS if self.study == "ate" else IV_ESTIMATORS
        if not self.estimators:
            raise ValueError("estimator list must not be empty")
        for est in self.estimators:
            if est not in known:
                raise ValueError(f"unknown estimator {est!r} for {self.study}")


# ---------------------------------------------------------------------------
# data generating processes
# ---------------------------------------------------------------------------

def _treatment_score(x):
    x1, x2, x3, x4, x5 = x.T
    return (0.1 * x1 ** 3 + 0.3 * x2 + 0.2 * np.log(x3 ** 2) + 0.1 * x4
            + 0.2 * x5 + np.abs(x1 * x2) + (x3 * x4) ** 2
            + 0.5 * (x2 * x4) ** 2 - 2.5)


def _dose_score(x):
    x1, x2, x3, x4, x5 = x.T
    return (0.7 * x1 + 0.4 * np.sin(x2) + 0.4 * np.abs(x3) + 0.6 * x4
            + 0.1 * x5 + 0.3 * x3 * x4 - 1.0)


def _outcome_base_iv(x):
    x1, x2, x3, x4, x5 = x.T
    return (0.4 * x1 ** 2 + 0.1 * np.abs(x2) + 0.1 * x3 ** 2
            + 0.2 * np.cos(x4) + 0.5 * np.sin(x5))


def latent_logit_marginal(f):
    """E[expit(f + eps)] for eps ~ N(0,1), by 64-node Gauss-Hermite."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    shifted = f[:, None] + math.sqrt(2.0) * _GH_NODES[None, :]
    return expit(shifted) @ (_GH_WEIGHTS / math.sqrt(math.pi))


def _phi_vec(f):
    return np.array([normal_cdf(v) for v in f])


def _draw_covariates(cfg, rep, attempt):
    g = substream(cfg.seed, rep, attempt, _COVARIATES)
    x = np.empty((cfg.n_units, 5))
    x[:, :3] = g.standard_normal((cfg.n_units, 3))
    x[:, 3:] = g.laplace(0.0, _LAPLACE_SCALE, (cfg.n_units, 2))
    return x


def _draw_indicator(cfg, rep, attempt, f):
    g = substream(cfg.seed, rep, attempt, _TREATMENT)
    eps = g.standard_normal(cfg.n_units)
    if cfg.model == 1:
        z = (g.random(cfg.n_units) < expit(f + eps)).astype(np.int8)
        e_oracle = latent_logit_marginal(f)
    else:
        z = (f > eps).astype(np.int8)
        e_oracle = _phi_vec(f)
    # keep the oracle representable inside (0, 1): |f| can be large enough
    # that the true propensity is within one ulp of the boundary
    return z, np.clip(e_oracle, 1e-12, 1.0 - 1e-12)


@dataclass(frozen=True)
class AteScenario:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    lam: float          # finite-population average treatment effect
    e_oracle: np.ndarray


def gen_ate_scenario(cfg, rep, attempt=0):
    """One synthetic pre-matching sample; deterministic in (seed, rep, attempt)."""
    x = _draw_covariates(cfg, rep, attempt)
    f = _treatment_score(x)
    z, e_oracle = _draw_indicator(cfg, rep, attempt, f)
    g = substream(cfg.seed, rep, attempt, _OUTCOME)
    x1, x2, x3, x4, x5 = x.T
    y0 = (0.2 * x1 ** 3 + 0.2 * np.abs(x2) + 0.2 * x3 ** 3
          + 0.5 * np.abs(x4) + 0.3 * x5 + g.standard_normal(cfg.n_units))
    y1 = y0 + (1.0 + 0.3 * x1 + 0.2 * x3 ** 3)
    y = np.where(z == 1, y1, y0)
    return AteScenario(x=x, z=z, y=y, y0=y0, y1=y1,
                       lam=float(np.mean(y1 - y0)), e_oracle=e_oracle)


@dataclass(frozen=True)
class IvScenario:
    x: np.ndarray
    z: np.ndarray       # instrument
    d: np.ndarray       # treatment uptake
    y: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    theta: float        # finite-population effect ratio
    e_oracle: np.ndarray
    redraws: int        # regenerations forced by a degenerate instrument


def gen_iv_scenario(cfg, rep, attempt=0):
    """One IV sample; redraws (counted) if the instrument moves no one."""
    for redraw in range(64):
        sub = attempt * 64 + redraw
        x = _draw_covariates(cfg, rep, sub)
        f1 = _treatment_score(x)
        z, e_oracle = _draw_indicator(cfg, rep, sub, f1)
        g = substream(cfg.seed, rep, sub, _CONFOUNDERS)
        u = g.standard_normal((cfg.n_units, 2)) @ _CONFOUNDER_CHOL.T
        u_d, u_y = u[:, 0], u[:, 1]
        g = substream(cfg.seed, rep, sub, _DOSE)
        eps_d = g.standard_normal(cfg.n_units)
        x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
        strength = 2.0 + 0.8 * x2 ** 2
        base = _dose_score(x) + u_d
        d0 = (base > eps_d).astype(float)
        d1 = (base + strength > eps_d).astype(float)
        d = np.where(z == 1, d1, d0)
        effect = 1.0 + 0.1 * x1 + 0.3 * x3 ** 2
        y_base = _outcome_base_iv(x) + u_y
        y = y_base + effect * d
        delta_d = float(np.sum(d1 - d0))
        if delta_d > 0:
            theta = float(np.sum(effect * (d1 - d0))) / delta_d
            return IvScenario(x=x, z=z, d=d, y=y, d0=d0, d1=d1, theta=theta,
                              e_oracle=e_oracle, redraws=redraw)
    raise RuntimeError("instrument degenerate in 64 consecutive redraws")


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RepRecord:
    rep: int
    estimator: str
    truth: float
    estimate: float
    ci_lower: float
    ci_upper: float
    ci_length: float
    covered: bool
    attempts: int       # balance-gate attempts consumed (>= 1)


def _finite_truth(values, weights=None):
    return float(np.mean(values))


def _match_scenario(cfg, scenario):
    e_hat = fit_scores(scenario.x, scenario.z, cfg.learner)
    caliper = None
    if cfg.caliper_on:
        caliper = cfg.caliper_scale * float(np.std(e_hat))
    spec = MatchSpec(caliper=caliper, max_set_size=cfg.max_set_size)
    result = full_match_dp(e_hat, scenario.z, spec)
    d = scenario.d if isinstance(scenario, IvScenario) else None
    ds, retained = build_matched_dataset(result, scenario.z, scenario.y,
                                         scenario.x, d=d, e_hat=e_hat)
    return ds, retained, e_hat


def _run_rep_ate(cfg, rep):
    rejections = 0
    for attempt in range(cfg.max_attempts):
        scenario = gen_ate_scenario(cfg, rep, attempt)
        try:
            ds, retained, e_hat = _match_scenario(cfg, scenario)
        except InfeasibleMatchError:
            rejections += 1
            continue
        if not apply_gate(cfg, ds, scenario):
            rejections += 1
            continue
        records = []
        lam_full = scenario.lam
        lam_retained = float(np.mean(scenario.y1[retained]
                                     - scenario.y0[retained]))
        unit_q = DesignMatrixSpec("unit")
        for est in cfg.estimators:
            if est == "fpw":
                res = fpw_estimate(scenario.z, scenario.y,
                                   clamp_scores(e_hat, cfg.clamp_rho),
                                   alpha=cfg.alpha)
                truth = lam_full
            elif est == "diff_in_means":
                res = analyze(ds, probs=None, q_spec=unit_q, alpha=cfg.alpha)
                truth = lam_retained
            elif est == "ippw":
                probs = regularize_probs(
                    post_match_probs(ds, ds.e_hat, source="plugin"),
                    ds, cfg.gamma)
                res = analyze(ds, probs=probs, q_spec=unit_q, alpha=cfg.alpha,
                              estimator_tag="ippw")
                truth = lam_retained
            else:  # ippw_oracle
                probs = post_match_probs(ds, scenario.e_oracle[retained],
                                         source="oracle")
                res = analyze(ds, probs=probs, q_spec=unit_q, alpha=cfg.alpha,
                              estimator_tag="ippw_oracle")
                truth = lam_retained
            records.append(RepRecord(
                rep=rep, estimator=est, truth=truth, estimate=res.estimate,
                ci_lower=res.ci_lower, ci_upper=res.ci_upper,
                ci_length=res.ci_upper - res.ci_lower,
                covered=res.ci_lower <= truth <= res.ci_upper,
                attempts=attempt + 1))
        return records, rejections, 0
    raise RuntimeError(
        f"balance gate never passed in {cfg.max_attempts} attempts "
        f"(rep {rep}, {rejections} rejections)")


def _run_rep_iv(cfg, rep):
    rejections = 0
    redraws = 0
    for attempt in range(cfg.max_attempts):
        scenario = gen_iv_scenario(cfg, rep, attempt)
        redraws += scenario.redraws
        try:
            ds, retained, e_hat = _match_scenario(cfg, scenario)
        except InfeasibleMatchError:
            rejections += 1
            continue
        if not apply_gate(cfg, ds, scenario):
            rejections += 1
            continue
        delta_d = scenario.d1[retained] - scenario.d0[retained]
        if float(np.sum(delta_d)) <= 0:
            rejections += 1
            continue
        effect = (1.0 + 0.1 * scenario.x[retained, 0]
                  + 0.3 * scenario.x[retained, 2] ** 2)
        theta = float(np.sum(effect * delta_d) / np.sum(delta_d))
        records = []
        for est in cfg.estimators:
            if est == "wald":
                probs = uniform_probs(ds)
                point = classical_wald(ds)
            elif est == "bc_wald":
                probs = regularize_probs(
                    post_match_probs(ds, ds.e_hat, source="plugin"),
                    ds, cfg.gamma)
                point = bc_wald(ds, probs)
            else:  # bc_wald_oracle
                probs = regularize_probs(
                    post_match_probs(ds, scenario.e_oracle[retained],
                                     source="oracle"),
                    ds, cfg.gamma)
                point = bc_wald(ds, probs)
            res = effect_ratio_confidence_set(ds, probs, alpha=cfg.alpha,
                                              estimator_tag=est)
            cs = res.confidence_set
            records.append(RepRecord(
                rep=rep, estimator=est, truth=theta, estimate=point,
                ci_lower=cs.lower, ci_upper=cs.upper, ci_length=cs.length(),
                covered=cs.contains(theta), attempts=attempt + 1))
        return records, rejections, redraws
    raise RuntimeError(
        f"balance gate never passed in {cfg.max_attempts} attempts "
        f"(rep {rep}, {rejections} rejections)")


def apply_gate(cfg, ds, scenario):
    rows = balance_table(ds, pre_matching=(scenario.z, scenario.x))
    return all((not r.degenerate) and abs(r.smd_post) < cfg.balance_threshold
               for r in rows)


def _run_one_rep(args):
    cfg, rep = args
    if cfg.study == "ate":
        return _run_rep_ate(cfg, rep)
    return _run_rep_iv(cfg, rep)


# ---------------------------------------------------------------------------
# study driver and reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    bias: float          # mean signed error
    ci_length: float     # mean length over bounded intervals
    coverage: float
    n_reps: int
    n_unbounded: int     # IV confidence sets that were not bounded intervals


@dataclass(frozen=True)
class SimulationReport:
    config: ScenarioConfig
    records: tuple
    gate_rejections: int
    iv_redraws: int

    def summaries(self):
        out = []
        for est in self.config.estimators:
            rows = [r for r in self.records if r.estimator == est]
            bias = float(np.mean([r.estimate - r.truth for r in rows]))
            lengths = [r.ci_length for r in rows if math.isfinite(r.ci_length)]
            out.append(EstimatorSummary(
                estimator=est,
                bias=bias,
                ci_length=float(np.mean(lengths)) if lengths else float("nan"),
                coverage=float(np.mean([r.covered for r in rows])),
                n_reps=len(rows),
                n_unbounded=sum(1 for r in rows
                                if not math.isfinite(r.ci_length))))
        return out


def run_study(cfg):
    """Run all replications (optionally in parallel) and collect records.

    The output is a pure function of the configuration: worker count only
    changes the schedule, never the result.
    """
    jobs = [(cfg, rep) for rep in range(cfg.reps)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_run_one_rep, jobs, chunksize=8))
    else:
        outcomes = [_run_one_rep(job) for job in jobs]
    records = []
    rejections = 0
    redraws = 0
    for recs, rej, red in outcomes:
        records.extend(recs)
        rejections += rej
        redraws += red
    records.sort(key=lambda r: (r.rep, cfg.estimators.index(r.estimator)))
    return SimulationReport(config=cfg, records=tuple(records),
                            gate_rejections=rejections, iv_redraws=redraws)


def summarize(report):
    """Per-estimator table as (csv_text, aligned_text).

    Column order follows the study tables: bias, CI length, coverage.
    """
    cfg = report.config
    caliper = "on" if cfg.caliper_on else "off"
    lines = ["study,model,caliper,estimator,bias,ci_length,coverage"]
    for s in report.summaries():
        lines.append(f"{cfg.study},{cfg.model},{caliper},{s.estimator},"
                     f"{s.bias:.6g},{s.ci_length:.6g},{s.coverage:.6g}")
    csv_text = "\n".join(lines) + "\n"

    width = max(len(s.estimator) for s in report.summaries())
    pretty = [f"{cfg.study} study, model {cfg.model}, caliper {caliper}, "
              f"{cfg.reps} replications "
              f"({report.gate_rejections} balance-gate rejections)"]
    pretty.append(f"{'estimator':<{width}}  {'bias':>10}  "
                  f"{'ci_length':>10}  {'coverage':>8}")
    for s in report.summaries():
        pretty.append(f"{s.estimator:<{width}}  {s.bias:>10.4f}  "
                      f"{s.ci_length:>10.4f}  {s.coverage:>8.3f}")
    return csv_text, "\n".join(pretty) + "\n"


def per_rep_csv(report):
    """Per-replication records, one row per (rep, estimator)."""
    lines = ["rep,estimator,truth,estimate,ci_lower,ci_upper,covered,attempts"]
    for r in report.records:
        lines.append(f"{r.rep},{r.estimator},{r.truth:.6g},{r.estimate:.6g},"
                     f"{r.ci_lower:.6g},{r.ci_upper:.6g},"
                     f"{int(r.covered)},{r.attempts}")
    return "\n".join(lines) + "\n"
