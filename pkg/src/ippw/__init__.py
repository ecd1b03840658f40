"""Randomization-based inference for inexactly matched observational studies.

Estimation and confidence intervals for the sample average treatment effect,
and for the effect ratio in matched instrumental-variable designs, using
inverse post-matching probability weighting; plus the supporting matching
engine, propensity learners, and a Monte-Carlo harness.
"""

__version__ = "0.1.0"

from .ate import (AteResult, DesignMatrixSpec, analyze, build_design_matrix,
                  confidence_interval, diff_in_means, fpw_estimate,
                  ippw_estimate, variance_estimator_Q)
from .design import (BalanceRow, MatchedDataset, MatchedSet, balance_table,
                     from_arrays, load_dataset, save_dataset, set_weights,
                     validate_design)
from .iv import (ConfidenceSet, EffectRatioResult, ar_statistic, ar_variance,
                 bc_wald, classical_wald, effect_ratio_confidence_set)
from .matching import (FullMatchResult, MatchSpec, apply_balance_gate,
                       brute_force_full_match, build_matched_dataset,
                       full_match_dp)
from .probabilities import (AssignmentProbs, SetAssignmentDistribution,
                            enumerate_assignment_dist, post_match_probs,
                            probs_one_control, probs_one_treated,
                            regularize_probs, uniform_probs)
from .propensity import (GbmModel, PropensityModelSpec, clamp_scores,
                         fit_gbm, fit_gbm_model, fit_logistic,
                         logistic_regression)
from .simulate import (ScenarioConfig, SimulationReport, gen_ate_scenario,
                       gen_iv_scenario, run_study, summarize)

__all__ = [name for name in dir() if not name.startswith("_")]
