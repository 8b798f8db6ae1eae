"""stepslab: narrow-to-wide step-by-step networks, their cost model and signal probes."""

__version__ = "0.1.0"

from .costing import allocate_depths, model_cost, width_schedule  # noqa: E402
from .presets import PRESETS, get_preset  # noqa: E402
from .steps import StepsConfig, StepsModel, steps_forward  # noqa: E402

__all__ = ["__version__", "StepsConfig", "StepsModel", "steps_forward", "model_cost", "width_schedule",
           "allocate_depths", "PRESETS", "get_preset"]
