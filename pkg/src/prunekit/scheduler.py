"""Global iterative pruning with a linear parameter schedule.

Each step removes roughly ``step`` of the original parameter count: all
groups are scored against fresh reference activations and the globally
cheapest channel is taken repeatedly until the step budget is met.  When
the validation loss rises above the previous step's, a recovery hook runs.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .depgraph import build_depgraph, enumerate_groups
from .engine import forward, reference_cache
from .gates import AGGREGATIONS, gate_set, reconstruction_error
from .ir import ShapeError, flops_estimate, param_count
from .pruner import PlanStep, PruningPlan, apply_many, removed_param_count

log = logging.getLogger(__name__)

REPORT_FORMAT = "prunekit-report/1"


class HookContractError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    ratio: float
    step: float = 0.01
    floor: int = 1
    agg: str = "mean"
    seed: int = 0
    always_recover: bool = False

    def __post_init__(self):
        self.ratio = float(self.ratio)
        self.step = float(self.step)
        self.floor = int(self.floor)
        self.seed = int(self.seed)
        if not 0 < self.ratio < 1:
            raise ValueError(f"ratio must be in (0, 1), got {self.ratio}")
        if self.step <= 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if self.floor < 1:
            raise ValueError(f"floor must be >= 1, got {self.floor}")
        if self.agg not in AGGREGATIONS:
            raise ValueError(f"agg must be one of {AGGREGATIONS}, got {self.agg!r}")

    @property
    def n_steps(self):
        # the 1e-9 keeps 0.7 / 0.01 = 69.999... from becoming 71 via float noise
        return max(1, math.ceil(self.ratio / self.step - 1e-9))


def step_target(p0, config, t):
    """Parameter count the model should have after step ``t`` (``t = 0`` is the original)."""
    return int(round(p0 * (1 - min(t * config.step, config.ratio))))


def step_budget(p0, config, t, current=None):
    """Parameters to remove at step ``t``; ``current`` defaults to the previous step's target."""
    if not 1 <= t <= config.n_steps:
        raise ValueError(f"step {t} outside 1..{config.n_steps}")
    if current is None:
        current = step_target(p0, config, t - 1)
    return current - step_target(p0, config, t)


def validation_loss(pruned, original, batch):
    """Mean squared deviation of the pruned model's outputs from the original's."""
    got = forward(pruned, batch)
    want = forward(original, batch)
    if list(got) != list(want):
        raise ShapeError(f"output heads differ: {list(got)} vs {list(want)}")
    total, count = 0.0, 0
    for k in want:
        if got[k].shape != want[k].shape:
            raise ShapeError(f"output shape mismatch {got[k].shape} vs {want[k].shape}", k)
        d = got[k].astype(np.float64) - want[k].astype(np.float64)
        total += float(np.sum(d * d))
        count += d.size
    return total / count


def identity_hook(model, context):
    return model


def _threads():
    try:
        return max(1, int(os.environ.get("PRUNEKIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class StepRecord:
    step: int
    target: int
    params_before: int
    params_after: int
    removals: list               # dicts: group, channel, score, raw_score, footprint
    max_channel_footprint: int
    val_loss: float
    val_loss_after: float
    hook_invoked: bool
    hook_error: str = ""
    wall_time: float = 0.0


@dataclass
class ScheduleReport:
    p0: int
    ratio: float
    step: float
    n_steps: int
    steps: list = field(default_factory=list)
    status: str = "complete"
    final_params: int = 0
    final_flops: int = 0
    original_flops: int = 0

    @property
    def max_channel_footprint(self):
        return max((s.max_channel_footprint for s in self.steps), default=0)

    def to_json(self, include_times=True):
        d = asdict(self)
        d["format"] = REPORT_FORMAT
        if not include_times:
            for s in d["steps"]:
                s.pop("wall_time")
        return d


def save_report(report, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report.to_json(), indent=1) + "\n")
    tmp.replace(path)


class _StepScorer:
    """Candidate scores of every group against one step's reference activations."""

    def __init__(self, model, groups, calib, config, counter=None):
        self.model = model
        self.counter = counter
        self.groups = groups
        self.calib = calib
        self.config = config
        self.reference = reference_cache(model, calib)
        self.gates = [gate_set(g, model) for g in groups]
        self.chosen = [[] for _ in groups]
        self.best = [None] * len(groups)     # (value, channel, score) per group

    def rescore(self, i):
        g, chosen = self.groups[i], self.chosen[i]
        if g.extent - len(chosen) - 1 < self.config.floor:
            self.best[i] = None
            return
        best = None
        trace = [] if self.counter is not None else None
        for c in range(g.extent):
            if c in chosen:
                continue
            s = reconstruction_error(self.model, g, chosen + [c], self.calib, self.reference,
                                     self.gates[i], self.config.agg, trace)
            if best is None or s.value < best[0]:
                best = (s.value, c, s)
        if trace:
            self.counter.extend((tuple(self.gates[i]), nid) for nid in trace)
        self.best[i] = best

    def rescore_all(self):
        n = _threads()
        if n > 1:
            with ThreadPoolExecutor(n) as ex:
                list(ex.map(self.rescore, range(len(self.groups))))
        else:
            for i in range(len(self.groups)):
                self.rescore(i)

    def pick(self):
        """Index of the group holding the globally cheapest candidate, or None."""
        best = None
        for i, b in enumerate(self.best):
            if b is not None and (best is None or b[0] < self.best[best][0]):
                best = i
        return best

    def merged(self):
        out = {}
        for g, chosen in zip(self.groups, self.chosen):
            for key, idx in g.removals(chosen).items() if chosen else ():
                out.setdefault(key, set()).update(idx)
        return {k: sorted(v) for k, v in out.items()}


def _max_channel_footprint(model, groups):
    best = 0
    for g in groups:
        for c in range(g.extent):
            best = max(best, removed_param_count(model, g.removals([c])))
    return best


def run_schedule(model, config, calib, val, hook=None, plan=None, loss_fn=None, counter=None):
    """Prune ``model`` to ``1 - config.ratio`` of its parameters.

    Returns ``(pruned model, ScheduleReport, PruningPlan)``.  The hook is
    called as ``hook(model, context)`` and must keep topology and shapes.
    ``loss_fn(pruned, original, val)`` replaces the output-MSE validation
    loss; ``counter`` collects ``(gates, node id)`` for every node executed
    while scoring candidates.
    """
    hook = hook or identity_hook
    loss_fn = loss_fn or validation_loss
    original = model
    p0 = param_count(model).total
    report = ScheduleReport(p0, config.ratio, config.step, config.n_steps,
                            original_flops=flops_estimate(model).total)
    plan = plan or PruningPlan(model.content_hash())
    prev_loss = 0.0
    for t in range(1, config.n_steps + 1):
        t0 = time.perf_counter()
        target = step_target(p0, config, t)
        before = param_count(model).total
        budget = before - target
        groups = enumerate_groups(build_depgraph(model))
        scorer = _StepScorer(model, groups, calib, config, counter)
        removals = []
        removed = 0
        if budget > 0:
            scorer.rescore_all()
        while removed < budget:
            i = scorer.pick()
            if i is None:
                report.status = "floor_exhausted"
                break
            value, c, score = scorer.best[i]
            scorer.chosen[i].append(c)
            now = removed_param_count(model, scorer.merged())
            removals.append({"group": groups[i].key, "channel": c, "score": value,
                             "raw_score": score.raw_value, "footprint": now - removed})
            removed = now
            scorer.rescore(i)
        fp = _max_channel_footprint(model, groups)
        selections = [(g, ch) for g, ch in zip(groups, scorer.chosen) if ch]
        if selections:
            model = apply_many(model, selections, config.floor)
            plan.steps.append(PlanStep(t, [
                {"group": g.key, "channels": list(ch),
                 "scores": [r["score"] for r in removals if r["group"] == g.key]}
                for g, ch in selections]))
        after = param_count(model).total
        loss = loss_fn(model, original, val)
        invoked = config.always_recover or loss > prev_loss
        loss_after, err = loss, ""
        if invoked:
            model, err = _run_hook(hook, model, {
                "step": t, "val_loss": loss, "prev_val_loss": prev_loss, "calib": calib,
                "val": val, "original": original, "seed": config.seed + t})
            if not err:
                loss_after = loss_fn(model, original, val)
        report.steps.append(StepRecord(t, target, before, after, removals, fp, loss, loss_after,
                                       invoked, err, time.perf_counter() - t0))
        log.info("step %d/%d: params %d -> %d (target %d), val loss %.6g%s", t, config.n_steps,
                 before, after, target, loss, " [recovery]" if invoked else "")
        prev_loss = loss_after
        if report.status != "complete":
            break
    report.final_params = param_count(model).total
    report.final_flops = flops_estimate(model).total
    plan.hash_after = model.content_hash()
    return model, report, plan


def check_hook_result(before, after):
    if after is None or after.topology_hash() != before.topology_hash():
        raise HookContractError("hook changed graph topology or parameter shapes")
    return after


def _run_hook(hook, model, context):
    try:
        return check_hook_result(model, hook(model, context)), ""
    except Exception as e:  # hook failures are recorded, never fatal
        log.warning("recovery hook failed at step %d: %s", context["step"], e)
        return model, f"{type(e).__name__}: {e}"
