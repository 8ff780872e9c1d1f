"""Gate sets and the reconstruction-error criterion.

The gates of a group are its member layers with no other member layer
downstream.  Removing group channels is scored by how much the gate
outputs move, compared with the unpruned reference on calibration data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import check_batch, forward_masked, reference_cache

EPS_NORM = 1e-12
AGGREGATIONS = ("mean", "sum", "max")


@dataclass
class ReconstructionScore:
    value: float                 # aggregate of normalized per-gate components
    components: dict             # gate id -> normalized error
    raw_components: dict         # gate id -> sum of squared deviations
    denominators: dict           # gate id -> reference energy + EPS_NORM
    agg: str = "mean"
    raw_value: float = field(init=False)

    def __post_init__(self):
        self.raw_value = aggregate(list(self.raw_components.values()), self.agg)


def aggregate(values, agg="mean"):
    if agg not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {agg!r}; expected one of {AGGREGATIONS}")
    if not values:
        return 0.0
    arr = np.asarray(values, dtype=np.float64)
    if agg == "mean":
        return float(arr.mean())
    if agg == "sum":
        return float(arr.sum())
    return float(arr.max())


def gate_set(group, model):
    """Member layers of ``group`` from which no other member layer is reachable."""
    layers = group.layers
    members = set(layers)
    cons = model.consumers()
    gates = []
    for layer in layers:
        seen = set()
        stack = list(cons[layer])
        hit = False
        while stack and not hit:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            if nid in members:
                hit = True
            stack.extend(cons[nid])
        if not hit:
            gates.append(layer)
    return gates


def group_mask(group, removed):
    return group.removals(removed)


def reconstruction_error(model, group, removed, calib, reference=None, gates=None, agg="mean", counter=None):
    """Score of removing root channels ``removed`` from ``group``.

    ``reference`` is a cache of unmasked activations on ``calib`` (at least
    the gate outputs; a full cache also lets unaffected nodes be reused).
    """
    calib = check_batch(model, calib)
    gates = gate_set(group, model) if gates is None else gates
    mask = group_mask(group, removed)
    if reference is None:
        reference = reference_cache(model, calib, gates)
    missing = [g for g in gates if g not in reference]
    if missing:
        reference = dict(reference)
        reference.update(reference_cache(model, calib, missing))
    for g in gates:
        if reference[g].shape[0] != calib.shape[0]:
            raise ValueError(f"reference activations for {g!r} come from a different batch")
    if mask:
        outs = forward_masked(model, calib, mask, gates, cache=reference, counter=counter)
    else:
        outs = {g: reference[g] for g in gates}
    comps, raws, dens = {}, {}, {}
    for g in gates:
        ref = reference[g].astype(np.float64)
        diff = ref - outs[g].astype(np.float64)
        raws[g] = float(np.sum(diff * diff))
        dens[g] = float(np.sum(ref * ref)) + EPS_NORM
        comps[g] = raws[g] / dens[g]
    return ReconstructionScore(aggregate(list(comps.values()), agg), comps, raws, dens, agg)
