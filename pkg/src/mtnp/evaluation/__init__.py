"""Predictive evaluation, metrics, transfer analysis and process checks."""

from mtnp.evaluation.checks import (
    CheckReport,
    check_consistency,
    check_exchangeability,
    order_dependent_mock,
    target_coupling_mock,
)
from mtnp.evaluation.imputation import ImputedJointPredictor, impute_context
from mtnp.evaluation.metrics import (
    MetricsReport,
    evaluate_split,
    mse,
    nll_metric,
    normalized_mse,
    write_metrics_csv,
)
from mtnp.evaluation.predictive import MCPrediction, mc_predictive
from mtnp.evaluation.transfer import pair_gains, source_sets, transfer_gain, transfer_table, write_transfer_csv

__all__ = [
    "CheckReport",
    "ImputedJointPredictor",
    "MCPrediction",
    "MetricsReport",
    "check_consistency",
    "check_exchangeability",
    "evaluate_split",
    "impute_context",
    "mc_predictive",
    "mse",
    "nll_metric",
    "normalized_mse",
    "order_dependent_mock",
    "pair_gains",
    "source_sets",
    "target_coupling_mock",
    "transfer_gain",
    "transfer_table",
    "write_metrics_csv",
    "write_transfer_csv",
]
