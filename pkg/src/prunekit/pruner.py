"""Greedy channel selection, exhaustive selection and physical channel removal."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depgraph import build_depgraph, enumerate_groups
from .engine import IN, OUT, reference_cache
from .gates import gate_set, reconstruction_error
from .ir import ModelGraph, NodeSpec

PLAN_FORMAT = "prunekit-plan/1"
BRUTE_FORCE_BUDGET = 10 ** 6


class FloorError(ValueError):
    pass


class PlanError(ValueError):
    pass


@dataclass
class RankedRemoval:
    entries: list = field(default_factory=list)  # (root channel, ReconstructionScore)

    @property
    def channels(self):
        return [c for c, _ in self.entries]

    @property
    def scores(self):
        return [s.value for _, s in self.entries]

    def __len__(self):
        return len(self.entries)


def greedy_select(model, group, k, calib, floor=1, reference=None, agg="mean", counter=None):
    """Pick ``k`` channels one at a time, each minimizing the score together with those before it.

    Ties go to the lowest channel index.
    """
    if not 1 <= k <= group.extent - floor:
        raise ValueError(f"k={k} out of range [1, {group.extent - floor}] for {group}")
    gates = gate_set(group, model)
    if reference is None:
        reference = reference_cache(model, calib)
    chosen = []
    ranked = RankedRemoval()
    remaining = list(range(group.extent))
    for _ in range(k):
        best = None
        for c in remaining:
            s = reconstruction_error(model, group, chosen + [c], calib, reference, gates, agg, counter)
            if best is None or s.value < best[1].value:
                best = (c, s)
        chosen.append(best[0])
        remaining.remove(best[0])
        ranked.entries.append(best)
    return ranked


def brute_force_select(model, group, k, calib, reference=None, agg="mean", budget=BRUTE_FORCE_BUDGET):
    """Globally optimal size-``k`` subset; ties go to the lexicographically smallest."""
    if not 0 <= k <= group.extent:
        raise ValueError(f"k={k} out of range for {group}")
    n_sets = math.comb(group.extent, k)
    if n_sets > budget:
        raise ValueError(f"C({group.extent}, {k}) = {n_sets} exceeds the enumeration budget {budget}")
    if k == 0:
        return (), 0.0
    gates = gate_set(group, model)
    if reference is None:
        reference = reference_cache(model, calib)
    best = None
    for subset in itertools.combinations(range(group.extent), k):
        v = reconstruction_error(model, group, list(subset), calib, reference, gates, agg).value
        if best is None or v < best[1]:
            best = (subset, v)
    return best


# -- physical removal ---------------------------------------------------------

def _node_removals(model, removals):
    """Per node: ``(removed input channels, removed output channels)``."""
    per_node = {}
    for (nid, side), idx in removals.items():
        ins, outs = per_node.setdefault(nid, (set(), set()))
        (ins if side == IN else outs).update(int(i) for i in idx)
    for nid, (ins, outs) in per_node.items():
        node = model.nodes[nid]
        if node.op in ("DepthwiseConv2d", "BatchNorm") and ins != outs:
            raise ValueError(f"node {nid!r}: tied axes pruned unevenly")
    return per_node


def removed_param_count(model, removals):
    """Number of parameters ``prune_removals`` would delete."""
    total = 0
    for nid, (ins, outs) in _node_removals(model, removals).items():
        node = model.nodes[nid]
        if node.op in ("Conv2d", "Linear"):
            w = model.param(nid, "weight")
            spatial = int(np.prod(w.shape[2:])) if w.ndim == 4 else 1
            cout, cin = w.shape[:2]
            total += (len(outs) * cin + len(ins) * cout - len(outs) * len(ins)) * spatial
            if "bias" in node.params:
                total += len(outs)
        elif node.op == "DepthwiseConv2d":
            w = model.param(nid, "weight")
            total += len(outs) * int(np.prod(w.shape[1:]))
            if "bias" in node.params:
                total += len(outs)
        elif node.op == "BatchNorm":
            total += 4 * len(outs)
    return total


def prune_removals(model, removals):
    """New model with the channels in ``removals`` (``{(layer, side): indices}``) deleted."""
    per_node = _node_removals(model, removals)
    shapes = model.infer_shapes()
    for (nid, side), idx in removals.items():
        node = model.nodes[nid]
        if side == OUT:
            extent = shapes[nid].channels
        elif node.op == "Concat":
            extent = sum(shapes[s].channels for s in node.inputs)
        else:
            extent = shapes[node.inputs[0]].channels
        idx = set(int(i) for i in idx)
        if idx and (min(idx) < 0 or max(idx) >= extent):
            raise IndexError(f"node {nid!r}: channel index out of range for extent {extent}")
        if extent - len(idx) < 1:
            raise FloorError(f"node {nid!r}: removing {len(idx)} of {extent} channels empties the axis")
    params = dict(model.params)
    for nid, (ins, outs) in per_node.items():
        node = model.nodes[nid]
        for role, name in node.params.items():
            arr = params[name]
            if role == "weight" and node.op in ("Conv2d", "Linear"):
                arr = np.delete(np.delete(arr, sorted(outs), axis=0), sorted(ins), axis=1)
            elif role in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
                arr = np.delete(arr, sorted(outs), axis=0)
            params[name] = np.ascontiguousarray(arr)
    nodes = [NodeSpec(n.id, n.op, list(n.inputs), dict(n.attrs), dict(n.params))
             for n in (model.nodes[nid] for nid in model.topo_order())]
    return ModelGraph(nodes, params, model.input_shape.dims)


def apply_prune(model, group, channels, floor=1):
    """Physically remove root ``channels`` of ``group`` from every coupled axis."""
    channels = sorted(set(int(c) for c in channels))
    if channels and (channels[0] < 0 or channels[-1] >= group.extent):
        raise IndexError(f"channel index out of range for {group}")
    if group.extent - len(channels) < floor:
        raise FloorError(f"removing {len(channels)} of {group.extent} channels violates floor {floor} of {group}")
    if not channels:
        return model
    return prune_removals(model, group.removals(channels))


def apply_many(model, selections, floor=1):
    """Apply ``[(group, channels), ...]`` computed on the same model, all at once."""
    merged = {}
    for group, channels in selections:
        if group.extent - len(set(channels)) < floor:
            raise FloorError(f"selection violates floor {floor} of {group}")
        for key, idx in group.removals(channels).items():
            merged.setdefault(key, set()).update(idx)
    if not merged:
        return model
    return prune_removals(model, {k: sorted(v) for k, v in merged.items()})


# -- plans --------------------------------------------------------------------

@dataclass
class PlanStep:
    step: int
    removals: list  # [{"group": key, "channels": [...], "scores": [...]}]


@dataclass
class PruningPlan:
    hash_before: str
    hash_after: str = ""
    steps: list = field(default_factory=list)

    def to_json(self):
        return {
            "format": PLAN_FORMAT,
            "hash_before": self.hash_before,
            "hash_after": self.hash_after,
            "steps": [{"step": s.step, "removals": s.removals} for s in self.steps],
        }

    @classmethod
    def from_json(cls, d):
        if d.get("format") != PLAN_FORMAT:
            raise PlanError(f"unsupported plan format {d.get('format')!r}, expected {PLAN_FORMAT!r}")
        return cls(d["hash_before"], d.get("hash_after", ""),
                   [PlanStep(int(s["step"]), list(s["removals"])) for s in d["steps"]])

    def __eq__(self, other):
        return isinstance(other, PruningPlan) and self.to_json() == other.to_json()


def save_plan(plan, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(plan.to_json(), indent=1) + "\n")
    tmp.replace(path)


def load_plan(path):
    return PruningPlan.from_json(json.loads(Path(path).read_text()))


def replay_plan(model, plan, floor=1):
    """Re-apply a plan to the model it was recorded on."""
    if model.content_hash() != plan.hash_before:
        raise PlanError("model hash does not match the plan's source model")
    for step in plan.steps:
        groups = {g.key: g for g in enumerate_groups(build_depgraph(model))}
        selections = []
        for r in step.removals:
            if r["group"] not in groups:
                raise PlanError(f"step {step.step}: group {r['group']!r} not found")
            selections.append((groups[r["group"]], r["channels"]))
        model = apply_many(model, selections, floor)
    if plan.hash_after and model.content_hash() != plan.hash_after:
        raise PlanError("replayed model hash differs from the plan's recorded result")
    return model
