from mtnp.datasets.batch import FunctionSplit, MultiTaskBatch, stack_items
from mtnp.datasets.masking import (
    EVAL_GAMMAS,
    sample_context_mask,
    sample_drop_mask,
    sample_totally_incomplete,
)
from mtnp.datasets.sampling import (
    context_from_target,
    make_batch,
    make_totally_incomplete_batch,
    target_batch,
)
from mtnp.datasets.synthetic import (
    TASKS,
    CurveFamily,
    SyntheticDataset,
    build_synthetic_dataset,
    eval_curve,
    sample_family_params,
)
from mtnp.datasets.weather import (
    WeatherSeries,
    generate_surrogate_weather,
    load_weather_table,
    standardize_and_split,
)

__all__ = [
    "EVAL_GAMMAS",
    "TASKS",
    "CurveFamily",
    "FunctionSplit",
    "MultiTaskBatch",
    "SyntheticDataset",
    "WeatherSeries",
    "build_synthetic_dataset",
    "context_from_target",
    "eval_curve",
    "generate_surrogate_weather",
    "load_weather_table",
    "make_batch",
    "make_totally_incomplete_batch",
    "sample_context_mask",
    "sample_drop_mask",
    "sample_family_params",
    "sample_totally_incomplete",
    "stack_items",
    "standardize_and_split",
    "target_batch",
]
