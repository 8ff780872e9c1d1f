"""Deterministic forward-only inference with activation taps and channel masks.

Dot products accumulate in float64; every node output is stored as
float32.  Masks zero weight slices (and biases of removed output channels),
which reproduces physical channel removal at every unpruned axis.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ir import FormatError, ModelError, ShapeError, _pair

TENSOR_FORMAT = "prunekit-tensor/1"

IN, OUT = "-", "+"


class TapError(ModelError):
    pass


class MaskError(ModelError):
    pass


# -- tensor files -------------------------------------------------------------

def save_tensor(array, path):
    """Write ``tensor.bin`` (little-endian f32, NCHW) and ``tensor.json`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f4")
    (path / "tensor.bin").write_bytes(arr.tobytes())
    (path / "tensor.json").write_text(json.dumps({"format": TENSOR_FORMAT, "shape": list(arr.shape)}) + "\n")


def load_tensor(path):
    path = Path(path)
    try:
        header = json.loads((path / "tensor.json").read_text())
        blob = (path / "tensor.bin").read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing tensor file: {e.filename}") from e
    if header.get("format") != TENSOR_FORMAT:
        raise FormatError(f"unsupported tensor format {header.get('format')!r}")
    shape = tuple(int(d) for d in header["shape"])
    if 4 * int(np.prod(shape)) != len(blob):
        raise FormatError(f"tensor blob length mismatch: header {shape} vs {len(blob)} bytes")
    return np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape)


# -- op kernels ---------------------------------------------------------------

def _pad(x, ph, pw, value=0.0):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    x = _pad(np.asarray(x, dtype=np.float64), ph, pw)
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    wt = weight.astype(np.float64)
    acc = np.zeros((cout, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            acc += np.tensordot(wt[:, :, i, j], patch, axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32)


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    x = _pad(np.asarray(x, dtype=np.float64), ph, pw)
    n, c, h, w = x.shape
    kh, kw = weight.shape[2:]
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    wt = weight[:, 0].astype(np.float64)
    acc = np.zeros((n, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            acc += patch * wt[None, :, i, j, None, None]
    if bias is not None:
        acc += bias.astype(np.float64)[None, :, None, None]
    return acc.astype(np.float32)


def linear(x, weight, bias=None):
    out = np.tensordot(weight.astype(np.float64), np.asarray(x, dtype=np.float64), axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32)


def batchnorm(x, gamma, beta, mean, var, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    scale = gamma.astype(np.float64) / np.sqrt(var.astype(np.float64) + eps)
    shift = beta.astype(np.float64) - mean.astype(np.float64) * scale
    return (x * scale[None, :, None, None] + shift[None, :, None, None]).astype(np.float32)


def _pool(x, attrs, mode):
    if attrs.get("global", False):
        red = np.max if mode == "max" else np.mean
        return red(x.astype(np.float64), axis=(2, 3), keepdims=True).astype(np.float32)
    kh, kw = _pair(attrs.get("kernel", 2))
    sh, sw = _pair(attrs.get("stride", attrs.get("kernel", 2)))
    ph, pw = _pair(attrs.get("padding", 0))
    xp = _pad(x.astype(np.float64), ph, pw, -np.inf if mode == "max" else 0.0)
    h, w = xp.shape[2:]
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    acc = None
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            if acc is None:
                acc = patch.copy()
            elif mode == "max":
                np.maximum(acc, patch, out=acc)
            else:
                acc += patch
    if mode == "avg":
        acc /= kh * kw
    return acc.astype(np.float32)


def _apply(node, ins, p):
    op, a = node.op, node.attrs
    if op in ("Input", "Output"):
        return ins[0]
    if op == "Conv2d":
        return conv2d(ins[0], p["weight"], p.get("bias"), a.get("stride", 1), a.get("padding", 0))
    if op == "DepthwiseConv2d":
        return depthwise_conv2d(ins[0], p["weight"], p.get("bias"), a.get("stride", 1), a.get("padding", 0))
    if op == "Linear":
        return linear(ins[0], p["weight"], p.get("bias"))
    if op == "BatchNorm":
        return batchnorm(ins[0], p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                         float(a.get("eps", 1e-5)))
    if op == "ReLU":
        return np.maximum(ins[0], np.float32(0))
    if op == "Add":
        acc = ins[0].astype(np.float64)
        for t in ins[1:]:
            acc = acc + t
        return acc.astype(np.float32)
    if op == "Concat":
        return np.concatenate(ins, axis=1)
    if op == "MaxPool":
        return _pool(ins[0], a, "max")
    if op == "AvgPool":
        return _pool(ins[0], a, "avg")
    if op == "UpsampleNearest":
        f = int(a.get("factor", 2))
        return np.repeat(np.repeat(ins[0], f, axis=2), f, axis=3)
    raise ModelError(f"unsupported op kind {op!r}", node.id)


# -- masking ------------------------------------------------------------------

def masked_params(model, mask):
    """Per-node parameter dicts with masked slices zeroed.

    ``mask`` maps ``(layer id, side)`` to channel indices.  Only nodes whose
    parameters change appear in the result.
    """
    out = {}
    for (nid, side), idx in mask.items():
        idx = sorted(set(int(i) for i in idx))
        if not idx:
            continue
        if nid not in model.nodes:
            raise MaskError("mask refers to unknown layer", nid)
        node = model.nodes[nid]
        extent = _axis_extent(model, nid, side)
        if idx[0] < 0 or idx[-1] >= extent:
            raise MaskError(f"mask index out of range for axis of extent {extent}", nid)
        if not node.params:
            continue
        p = out.setdefault(nid, {role: model.params[name].copy() for role, name in node.params.items()})
        if node.op in ("Conv2d", "Linear"):
            if side == IN:
                p["weight"][:, idx] = 0
            else:
                p["weight"][idx] = 0
                if "bias" in p:
                    p["bias"][idx] = 0
        elif node.op == "DepthwiseConv2d":
            p["weight"][idx] = 0
            if "bias" in p:
                p["bias"][idx] = 0
        elif node.op == "BatchNorm":
            p["gamma"][idx] = 0
            p["beta"][idx] = 0
    return out


def _axis_extent(model, nid, side):
    shapes = model.infer_shapes()
    node = model.nodes[nid]
    if side == OUT:
        return shapes[nid].channels
    if node.op == "Input":
        raise MaskError("Input has no input axis", nid)
    return sum(shapes[s].channels for s in node.inputs) if node.op == "Concat" else shapes[node.inputs[0]].channels


def _touched_nodes(model, mask):
    touched = set()
    for (nid, side), idx in mask.items():
        if len(idx) and model.nodes[nid].params:
            touched.add(nid)
    return touched


# -- execution ----------------------------------------------------------------

def check_batch(model, batch):
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != model.input_shape.dims[1:]:
        raise ShapeError(f"batch shape {batch.shape} does not match declared input "
                         f"{('N',) + model.input_shape.dims[1:]}", model.input_id)
    if not np.all(np.isfinite(batch)):
        raise ShapeError("batch contains non-finite values", model.input_id)
    return batch.astype(np.float32, copy=False)


def execute(model, batch, targets, mask=None, cache=None, counter=None):
    """Evaluate only the nodes needed for ``targets``.

    ``cache`` holds reference activations of the unmasked model on the same
    batch; nodes upstream of every masked layer are read from it instead of
    recomputed.  Every executed node id is appended to ``counter`` when given.
    Returns a dict of all computed (or reused) activations.
    """
    batch = check_batch(model, batch)
    for t in targets:
        if t not in model.nodes:
            raise TapError("unknown tap id", t)
    mask = mask or {}
    override = masked_params(model, mask) if mask else {}
    needed = model.ancestors(targets)
    dirty = model.descendants(_touched_nodes(model, mask)) if mask else set()
    values = {}
    for nid in model.topo_order():
        if nid not in needed:
            continue
        if cache is not None and nid not in dirty and nid in cache:
            values[nid] = cache[nid]
            continue
        node = model.nodes[nid]
        if node.op == "Input":
            values[nid] = batch
        else:
            p = override.get(nid)
            if p is None:
                p = {role: model.params[name] for role, name in node.params.items()}
            values[nid] = _apply(node, [values[s] for s in node.inputs], p)
        if counter is not None:
            counter.append(nid)
    return values


def forward(model, batch):
    """Outputs of the model, keyed by Output node id."""
    outs = model.output_ids
    vals = execute(model, batch, outs)
    return {o: vals[o] for o in outs}


def forward_tapped(model, batch, taps, cache=None, counter=None):
    vals = execute(model, batch, list(taps), cache=cache, counter=counter)
    return {t: vals[t] for t in taps}


def forward_masked(model, batch, mask, taps, cache=None, counter=None):
    """Tapped activations with every masked channel's contribution removed.

    Rejects masks on a tap's own output axis: a tapped output with removed
    channels would not be comparable to its reference.
    """
    for t in taps:
        if t in model.nodes and len(mask.get((t, OUT), ())):
            raise MaskError("mask touches the output axis of a tapped node", t)
    vals = execute(model, batch, list(taps), mask=mask, cache=cache, counter=counter)
    return {t: vals[t] for t in taps}


def reference_cache(model, batch, targets=None):
    """All activations needed for ``targets`` (default: every node)."""
    targets = list(model.topo_order()) if targets is None else list(targets)
    return execute(model, batch, targets)
