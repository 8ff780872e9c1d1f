"""Structured channel pruning of CNN graphs with gated reconstruction-error scoring."""

from .ir import ModelGraph, NodeSpec, TensorShape, load_model, save_model, param_count, flops_estimate
from .engine import forward, forward_tapped, forward_masked, load_tensor, save_tensor
from .depgraph import build_depgraph, collect_group, enumerate_groups, export_dot
from .gates import gate_set, reconstruction_error
from .pruner import apply_prune, brute_force_select, greedy_select
from .scheduler import ScheduleConfig, run_schedule

__version__ = "0.1.0"

__all__ = [
    "ModelGraph", "NodeSpec", "TensorShape", "load_model", "save_model", "param_count", "flops_estimate",
    "forward", "forward_tapped", "forward_masked", "load_tensor", "save_tensor",
    "build_depgraph", "collect_group", "enumerate_groups", "export_dot",
    "gate_set", "reconstruction_error", "apply_prune", "brute_force_select", "greedy_select",
    "ScheduleConfig", "run_schedule",
]
