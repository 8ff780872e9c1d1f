"""Command-line driver: ``inspect``, ``prune``, ``eval`` and ``gen-toy``."""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .depgraph import GroupError, build_depgraph, collect_group, enumerate_groups, export_dot
from .engine import forward, load_tensor, save_tensor
from .gates import AGGREGATIONS, gate_set
from .ir import ModelError, _replace_dir, flops_estimate, load_model, param_count, save_model
from .pruner import save_plan
from .scheduler import ScheduleConfig, run_schedule, save_report, validation_loss
from .toy import BLOCK_TYPES, ToyModelSpec, generate_toy, random_batch

EXIT_OK, EXIT_ERROR, EXIT_FLOOR = 0, 1, 2

CONFIG_KEYS = {"ratio": float, "step": float, "floor": int, "agg": str, "seed": int,
               "calib": str, "val": str, "always_recover": str}


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string("[prune]\n" + Path(path).read_text())
    out = {}
    for key, value in parser["prune"].items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = CONFIG_KEYS[key](value)
    if "always_recover" in out:
        out["always_recover"] = out["always_recover"].strip().lower() in ("1", "true", "yes", "on")
    return out


def inspect_text(model, name=""):
    dg = build_depgraph(model)
    groups = enumerate_groups(dg)
    pc, fl = param_count(model), flops_estimate(model)
    lines = [f"model: {name}" if name else "model:",
             f"nodes: {len(model.nodes)}",
             f"input: {'x'.join(str(d) for d in model.input_shape.dims)}",
             f"parameters: {pc.total}",
             f"flops: {fl.total}",
             f"groups: {len(groups)}"]
    if groups:
        width = max(len(g.key) for g in groups)
        lines.append(f"  {'group'.ljust(width)}  extent  axes  gates")
        for g in groups:
            lines.append(f"  {g.key.ljust(width)}  {g.extent:>6}  {len(g.order):>4}  {','.join(gate_set(g, model))}")
    lines.append("layers:")
    for nid in model.topo_order():
        lines.append(f"  {nid:<16} {model.nodes[nid].op:<16} params {pc.per_node[nid]:>8}  flops {fl.per_node[nid]:>10}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args):
    model = load_model(args.model)
    if args.dot:
        dg = build_depgraph(model)
        group, gates = None, ()
        if args.group:
            layer, side = args.group[:-1], args.group[-1]
            group = collect_group(dg, (layer, side))
            gates = gate_set(group, model)
        sys.stdout.write(export_dot(dg, group, gates))
    else:
        sys.stdout.write(inspect_text(model, str(args.model)))
    return EXIT_OK


def _batch(path, model, seed):
    if path:
        return load_tensor(path)
    return random_batch(model.input_shape.dims, seed)


def cmd_prune(args):
    settings = read_config(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None and v is not False:
            settings[key] = v
    if "ratio" not in settings:
        raise ValueError("--ratio is required (flag or config file)")
    config = ScheduleConfig(settings["ratio"], settings.get("step", 0.01), settings.get("floor", 1),
                            settings.get("agg", "mean"), settings.get("seed", 0),
                            bool(settings.get("always_recover", False)))
    model = load_model(args.model)
    calib = _batch(settings.get("calib"), model, config.seed)
    val = _batch(settings.get("val"), model, config.seed + 1)
    pruned, report, plan = run_schedule(model, config, calib, val)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        save_model(pruned, tmp / "model")
        save_plan(plan, tmp / "plan.json")
        save_report(report, tmp / "report.json")
        _replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"parameters: {report.p0} -> {report.final_params} "
          f"({100 * (1 - report.final_params / report.p0):.2f}% removed in {len(report.steps)} steps)")
    print(f"flops: {report.original_flops} -> {report.final_flops}")
    print(f"weights sha256: {pruned.weights_hash()}")
    if report.status == "floor_exhausted":
        print("stopped early: every group is at its channel floor", file=sys.stderr)
        return EXIT_FLOOR
    return EXIT_OK


def cmd_eval(args):
    model = load_model(args.model)
    batch = load_tensor(args.batch) if args.batch else random_batch(model.input_shape.dims, args.seed)
    forward(model, batch)
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        forward(model, batch)
        times.append(time.perf_counter() - t0)
    print(f"parameters: {param_count(model).total}")
    print(f"flops: {flops_estimate(model).total}")
    print(f"forward_ms: {1000 * float(np.mean(times)):.3f} (mean of {args.runs})")
    if args.reference:
        ref = load_model(args.reference)
        print(f"reference_parameters: {param_count(ref).total}")
        print(f"reference_flops: {flops_estimate(ref).total}")
        print(f"mse: {validation_loss(model, ref, batch):.9g}")
    return EXIT_OK


def cmd_gen_toy(args):
    spec = ToyModelSpec(args.seed, args.depth, _ints(args.widths),
                        tuple(b.strip() for b in args.blocks.split(",") if b.strip()),
                        _ints(args.input_shape))
    model = generate_toy(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        save_model(model, tmp / "model")
        shape = (args.batch_size,) + spec.input_shape[1:]
        save_tensor(random_batch(shape, args.seed + 1), tmp / "calib")
        save_tensor(random_batch(shape, args.seed + 2), tmp / "val")
        (tmp / "toy.json").write_text(json.dumps({
            "seed": spec.seed, "depth": spec.depth, "widths": list(spec.widths),
            "blocks": list(spec.blocks), "input_shape": list(spec.input_shape)}, indent=1) + "\n")
        _replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {out}: {len(model.nodes)} nodes, {param_count(model).total} parameters")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="prunekit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("inspect", help="list groups, gates and footprints")
    s.add_argument("--model", required=True)
    s.add_argument("--dot", action="store_true", help="emit the dependency graph as DOT")
    s.add_argument("--group", help="axis to highlight with --dot, e.g. conv2d1+")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("prune", help="run the global iterative schedule")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--calib")
    s.add_argument("--val")
    s.add_argument("--ratio", type=float)
    s.add_argument("--step", type=float)
    s.add_argument("--floor", type=int)
    s.add_argument("--agg", choices=AGGREGATIONS)
    s.add_argument("--seed", type=int)
    s.add_argument("--always-recover", dest="always_recover", action="store_true")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("eval", help="parameters, FLOPs, timing and MSE against a reference")
    s.add_argument("--model", required=True)
    s.add_argument("--batch", "--val", dest="batch")
    s.add_argument("--reference")
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gen-toy", help="write a seeded toy model with calibration and validation batches")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--depth", type=int, default=5)
    s.add_argument("--widths", default="32,48")
    s.add_argument("--blocks", default=",".join(BLOCK_TYPES))
    s.add_argument("--input-shape", default="4,3,16,16")
    s.add_argument("--batch-size", type=int, default=4)
    s.set_defaults(func=cmd_gen_toy)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ModelError, GroupError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
