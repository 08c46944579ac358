"""Dense-network training with exact feature-memory accounting.

Three execution strategies (``naive``, ``shared-grad``, ``shared-all``)
compute bitwise-identical losses and gradients while differing in how much
feature-map memory a training step needs.
"""
from .alloctrace import Accountant, MemoryStats, OpTrace, predict_peak_elements
from .densenet import ActivationOrder, DenseNetConfig, build_config, count_parameters, layer_spec, preset
from .errors import DenseplanError
from .graph import ExecutionStrategy, GraphPlan, backward, build_plan, forward, step_trace
from .tensor import ArenaTag, Shape4, Tensor

__all__ = [
    "Accountant", "ActivationOrder", "ArenaTag", "DenseNetConfig", "DenseplanError", "ExecutionStrategy",
    "GraphPlan", "MemoryStats", "OpTrace", "Shape4", "Tensor", "backward", "build_config", "build_plan",
    "count_parameters", "forward", "layer_spec", "predict_peak_elements", "preset", "step_trace",
]
__version__ = "0.1.0"
