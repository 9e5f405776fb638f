"""Estimation and evaluation of optimal dynamic treatment regimes."""

from .core import (
    CONSISTENT,
    ConfigError,
    DataError,
    Dataset,
    DecisionFnRule,
    DtrlabError,
    FeatureMap,
    History,
    LinearSignRule,
    Regime,
    ShapeError,
    ThresholdRule,
    Trajectory,
    TreeRule,
    apply_regime,
    consistency_index,
    history,
)
from .ctree import CausalTree, TreeHyperparams, build_causal_tree, causal_tree_fit
from .direct import (
    OwlSpec,
    RegimeClass,
    ValueEstimate,
    aipwe_value,
    bowl_fit,
    ipwe_value,
    search_optimal_regime,
)
from .indirect import (
    FitResult,
    PropensityModel,
    StageModelSpec,
    a_learning_fit,
    blip_regret_convert,
    fit_propensity_models,
    q_learning_fit,
    regret_to_blip,
    stage_spec,
)
from .simlab import (
    AccuracyReport,
    DgpSpec,
    McValueReport,
    SpecError,
    bootstrap_se,
    case1_dgp,
    case1_oracle_regime,
    case2_dgp,
    case2_oracle_regime,
    decision_accuracy,
    generate_case1,
    generate_case2,
    generate_from_spec,
    mc_value,
)
from .stats import (
    ConvergenceError,
    EvaluationError,
    LinearFit,
    LogisticFit,
    NumericalError,
    OptimizerConfig,
    SingularDesignError,
    logistic_fit,
    maximize,
    ols_fit,
    solve_joint_linear_ee,
)

__version__ = "0.1.0"

__all__ = [
    "CONSISTENT",
    "AccuracyReport",
    "CausalTree",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "Dataset",
    "DecisionFnRule",
    "DgpSpec",
    "DtrlabError",
    "EvaluationError",
    "FeatureMap",
    "FitResult",
    "History",
    "LinearFit",
    "LinearSignRule",
    "LogisticFit",
    "McValueReport",
    "NumericalError",
    "OptimizerConfig",
    "OwlSpec",
    "PropensityModel",
    "Regime",
    "RegimeClass",
    "ShapeError",
    "SingularDesignError",
    "SpecError",
    "StageModelSpec",
    "ThresholdRule",
    "Trajectory",
    "TreeHyperparams",
    "TreeRule",
    "ValueEstimate",
    "a_learning_fit",
    "aipwe_value",
    "apply_regime",
    "blip_regret_convert",
    "bootstrap_se",
    "bowl_fit",
    "build_causal_tree",
    "case1_dgp",
    "case1_oracle_regime",
    "case2_dgp",
    "case2_oracle_regime",
    "causal_tree_fit",
    "consistency_index",
    "decision_accuracy",
    "fit_propensity_models",
    "generate_case1",
    "generate_case2",
    "generate_from_spec",
    "history",
    "ipwe_value",
    "logistic_fit",
    "maximize",
    "mc_value",
    "ols_fit",
    "q_learning_fit",
    "regret_to_blip",
    "search_optimal_regime",
    "solve_joint_linear_ee",
    "stage_spec",
    "__version__",
]
