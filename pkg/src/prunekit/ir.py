"""Graph representation, shape inference, footprints and the on-disk model format.

A model is a DAG of typed nodes.  Every node refers to its parameters by
name; the tensors live in one flat parameter store (float32).  Activations
are NCHW.  Linear layers act on the channel axis at every spatial position,
so a global AvgPool followed by Linear is the usual classifier head.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_FORMAT = "prunekit-model/1"

OP_KINDS = (
    "Input", "Output", "Conv2d", "DepthwiseConv2d", "Linear", "BatchNorm",
    "ReLU", "Add", "Concat", "MaxPool", "AvgPool", "UpsampleNearest",
)

# parameter roles each op requires / accepts
REQUIRED_PARAMS = {
    "Conv2d": ("weight",),
    "DepthwiseConv2d": ("weight",),
    "Linear": ("weight",),
    "BatchNorm": ("gamma", "beta", "running_mean", "running_var"),
}
OPTIONAL_PARAMS = {"Conv2d": ("bias",), "DepthwiseConv2d": ("bias",), "Linear": ("bias",)}

# ops whose input and output channel axes are one and the same
TIED_OPS = frozenset({
    "DepthwiseConv2d", "BatchNorm", "ReLU", "Add", "Concat",
    "MaxPool", "AvgPool", "UpsampleNearest",
})


class ModelError(ValueError):
    """Invalid model; ``node_id`` names the offending node when known."""

    def __init__(self, message, node_id=None):
        self.node_id = node_id
        prefix = f"node {node_id!r}: " if node_id is not None else ""
        super().__init__(prefix + message)


class ShapeError(ModelError):
    pass


class FormatError(ModelError):
    pass


@dataclass(frozen=True)
class TensorShape:
    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise ShapeError(f"invalid extents {dims}")
        object.__setattr__(self, "dims", dims)

    def __iter__(self):
        return iter(self.dims)

    def __len__(self):
        return len(self.dims)

    def __getitem__(self, i):
        return self.dims[i]

    @property
    def channels(self):
        return self.dims[1]


@dataclass
class NodeSpec:
    id: str
    op: str
    inputs: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # role -> parameter name

    def to_json(self):
        return {"id": self.id, "op": self.op, "inputs": list(self.inputs),
                "attrs": dict(self.attrs), "params": dict(self.params)}

    @classmethod
    def from_json(cls, d):
        return cls(d["id"], d["op"], list(d.get("inputs", [])),
                   dict(d.get("attrs", {})), dict(d.get("params", {})))


@dataclass
class Footprint:
    """Per-node counts (parameters or FLOPs) with their total."""

    per_node: dict
    total: int


def _pair(v):
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _window_out(size, k, stride, pad, node_id):
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"window {k} (stride {stride}, pad {pad}) larger than input {size}", node_id)
    return out


class ModelGraph:
    """Nodes in topological order plus a float32 parameter store.

    Treat instances as immutable once validated; pruning returns new graphs.
    """

    def __init__(self, nodes, params, input_shape, validate=True):
        self.nodes = {}
        for n in nodes:
            if n.id in self.nodes:
                raise ModelError("duplicate node id", n.id)
            self.nodes[n.id] = n
        self.params = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}
        self.input_shape = TensorShape(input_shape)
        self._order = None
        self._shapes = None
        if validate:
            self.validate()

    # -- structure ---------------------------------------------------------
    def topo_order(self):
        if self._order is None:
            self._order = _toposort(self.nodes)
        return self._order

    def consumers(self):
        out = {nid: [] for nid in self.nodes}
        for nid in self.topo_order():
            for src in self.nodes[nid].inputs:
                if nid not in out[src]:
                    out[src].append(nid)
        return out

    @property
    def input_id(self):
        return next(n.id for n in self.nodes.values() if n.op == "Input")

    @property
    def output_ids(self):
        return [nid for nid in self.topo_order() if self.nodes[nid].op == "Output"]

    def param(self, node_id, role):
        name = self.nodes[node_id].params.get(role)
        return None if name is None else self.params[name]

    def ancestors(self, targets):
        """Node ids from which any target is reachable, targets included."""
        seen = set()
        stack = list(targets)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return seen

    def descendants(self, sources):
        """Node ids reachable from any source, sources included."""
        cons = self.consumers()
        seen = set()
        stack = list(sources)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(cons[nid])
        return seen

    # -- validation --------------------------------------------------------
    def validate(self):
        kinds = [n.op for n in self.nodes.values()]
        for n in self.nodes.values():
            if n.op not in OP_KINDS:
                raise ModelError(f"unsupported op kind {n.op!r}", n.id)
            for src in n.inputs:
                if src not in self.nodes:
                    raise ModelError(f"unknown input {src!r}", n.id)
            for role in REQUIRED_PARAMS.get(n.op, ()):
                if role not in n.params:
                    raise ModelError(f"missing parameter ref {role!r}", n.id)
            allowed = set(REQUIRED_PARAMS.get(n.op, ())) | set(OPTIONAL_PARAMS.get(n.op, ()))
            for role, name in n.params.items():
                if role not in allowed:
                    raise ModelError(f"unexpected parameter role {role!r}", n.id)
                if name not in self.params:
                    raise ModelError(f"dangling parameter ref {name!r}", n.id)
            if n.op == "Concat" and int(n.attrs.get("axis", 1)) != 1:
                raise ModelError("only channel-axis Concat is supported", n.id)
        if kinds.count("Input") != 1:
            raise ModelError(f"expected exactly one Input node, found {kinds.count('Input')}")
        if "Output" not in kinds:
            raise ModelError("model has no Output node")
        refs = [name for n in self.nodes.values() for name in n.params.values()]
        seen = set()
        for n in self.nodes.values():
            for name in n.params.values():
                if name in seen:
                    raise ModelError(f"parameter {name!r} shared between nodes", n.id)
                seen.add(name)
        if len(refs) != len(self.params):
            unused = sorted(set(self.params) - set(refs))
            raise ModelError(f"unreferenced parameters {unused}")
        cons = self.consumers()
        for nid, users in cons.items():
            if not users and self.nodes[nid].op != "Output":
                raise ModelError("node output is never consumed", nid)
        if len(self.input_shape) != 4:
            raise ShapeError("declared input shape must be rank 4 (N, C, H, W)")
        self.topo_order()
        self.infer_shapes()
        return self

    def infer_shapes(self, batch=None):
        """Output shape of every node.  ``batch`` overrides the declared batch extent."""
        if batch is None and self._shapes is not None:
            return dict(self._shapes)
        shapes = infer_shapes(self, batch)
        if batch is None:
            self._shapes = shapes
        return dict(shapes)

    # -- misc --------------------------------------------------------------
    def copy(self, params=None):
        nodes = [NodeSpec(n.id, n.op, list(n.inputs), dict(n.attrs), dict(n.params))
                 for n in self.nodes.values()]
        return ModelGraph(nodes, dict(self.params) if params is None else params,
                          self.input_shape.dims)

    def graph_json(self):
        """Graph descriptor and weight blob (bytes) exactly as written to disk."""
        entries = []
        chunks = []
        offset = 0
        for nid in self.topo_order():
            node = self.nodes[nid]
            for role in sorted(node.params):
                name = node.params[role]
                arr = self.params[name]
                data = arr.astype("<f4", copy=False).tobytes()
                entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
                chunks.append(data)
                offset += len(data)
        edges = [[src, nid] for nid in self.topo_order() for src in self.nodes[nid].inputs]
        desc = {
            "format": MODEL_FORMAT,
            "input_shape": list(self.input_shape.dims),
            "nodes": [self.nodes[nid].to_json() for nid in self.topo_order()],
            "edges": edges,
            "params": entries,
        }
        return desc, b"".join(chunks)

    def content_hash(self):
        desc, blob = self.graph_json()
        h = hashlib.sha256(json.dumps(desc, sort_keys=True).encode())
        h.update(blob)
        return h.hexdigest()

    def weights_hash(self):
        return hashlib.sha256(self.graph_json()[1]).hexdigest()

    def topology_hash(self):
        """Hash of structure and parameter shapes, ignoring weight values."""
        desc, _ = self.graph_json()
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


def _toposort(nodes):
    """Kahn's algorithm; ties resolved by declaration order."""
    indeg = {nid: 0 for nid in nodes}
    cons = {nid: [] for nid in nodes}
    for nid, n in nodes.items():
        for src in n.inputs:
            if src not in nodes:
                raise ModelError(f"unknown input {src!r}", nid)
            indeg[nid] += 1
            cons[src].append(nid)
    position = {nid: i for i, nid in enumerate(nodes)}
    ready = sorted((nid for nid, d in indeg.items() if d == 0), key=position.__getitem__)
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for c in cons[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort(key=position.__getitem__)
    if len(order) != len(nodes):
        stuck = sorted(nid for nid, d in indeg.items() if d > 0)
        raise ModelError("cycle detected", stuck[0])
    return order


def infer_shapes(model, batch=None):
    shapes = {}
    for nid in model.topo_order():
        node = model.nodes[nid]
        ins = [shapes[s] for s in node.inputs]
        shapes[nid] = TensorShape(_node_shape(model, node, ins, batch))
    return shapes


def _expect_inputs(node, ins, count=None):
    if count is not None and len(ins) != count:
        raise ShapeError(f"{node.op} expects {count} input(s), got {len(ins)}", node.id)
    if count is None and not ins:
        raise ShapeError(f"{node.op} needs at least one input", node.id)


def _node_shape(model, node, ins, batch):
    op, nid = node.op, node.id
    if op == "Input":
        _expect_inputs(node, ins, 0)
        dims = model.input_shape.dims
        return (batch or dims[0],) + dims[1:]
    if op == "Output":
        _expect_inputs(node, ins, 1)
        return ins[0].dims
    if op in ("Conv2d", "DepthwiseConv2d"):
        _expect_inputs(node, ins, 1)
        n, c, h, w = ins[0].dims
        wt = model.param(nid, "weight")
        if wt.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {wt.shape}", nid)
        cout, cin, kh, kw = wt.shape
        if op == "DepthwiseConv2d":
            if cin != 1:
                raise ShapeError(f"depthwise weight must be (C, 1, kh, kw), got {wt.shape}", nid)
            cin = cout
        if cin != c:
            raise ShapeError(f"channel mismatch: weight expects {cin} input channels, producer gives {c}", nid)
        _check_vector(model, node, "bias", cout)
        sh, sw = _pair(node.attrs.get("stride", 1))
        ph, pw = _pair(node.attrs.get("padding", 0))
        return (n, cout, _window_out(h, kh, sh, ph, nid), _window_out(w, kw, sw, pw, nid))
    if op == "Linear":
        _expect_inputs(node, ins, 1)
        n, c, h, w = ins[0].dims
        wt = model.param(nid, "weight")
        if wt.ndim != 2:
            raise ShapeError(f"linear weight must be rank 2, got {wt.shape}", nid)
        if wt.shape[1] != c:
            raise ShapeError(f"channel mismatch: weight expects {wt.shape[1]} inputs, producer gives {c}", nid)
        _check_vector(model, node, "bias", wt.shape[0])
        return (n, wt.shape[0], h, w)
    if op == "BatchNorm":
        _expect_inputs(node, ins, 1)
        c = ins[0].dims[1]
        for role in REQUIRED_PARAMS["BatchNorm"]:
            _check_vector(model, node, role, c)
        return ins[0].dims
    if op == "ReLU":
        _expect_inputs(node, ins, 1)
        return ins[0].dims
    if op == "Add":
        _expect_inputs(node, ins)
        first = ins[0].dims
        for s in ins[1:]:
            if s.dims[1] != first[1]:
                raise ShapeError(f"channel mismatch in Add: {first} vs {s.dims}", nid)
            if s.dims != first:
                raise ShapeError(f"spatial mismatch in Add: {first} vs {s.dims}", nid)
        return first
    if op == "Concat":
        _expect_inputs(node, ins)
        first = ins[0].dims
        for s in ins[1:]:
            if (s.dims[0], s.dims[2], s.dims[3]) != (first[0], first[2], first[3]):
                raise ShapeError(f"spatial mismatch in Concat: {first} vs {s.dims}", nid)
        return (first[0], sum(s.dims[1] for s in ins), first[2], first[3])
    if op in ("MaxPool", "AvgPool"):
        _expect_inputs(node, ins, 1)
        n, c, h, w = ins[0].dims
        if node.attrs.get("global", False):
            return (n, c, 1, 1)
        kh, kw = _pair(node.attrs.get("kernel", 2))
        sh, sw = _pair(node.attrs.get("stride", node.attrs.get("kernel", 2)))
        ph, pw = _pair(node.attrs.get("padding", 0))
        return (n, c, _window_out(h, kh, sh, ph, nid), _window_out(w, kw, sw, pw, nid))
    if op == "UpsampleNearest":
        _expect_inputs(node, ins, 1)
        f = int(node.attrs.get("factor", 2))
        if f < 1:
            raise ShapeError(f"upsample factor must be >= 1, got {f}", nid)
        n, c, h, w = ins[0].dims
        return (n, c, h * f, w * f)
    raise ModelError(f"unsupported op kind {op!r}", nid)


def _check_vector(model, node, role, length):
    arr = model.param(node.id, role)
    if arr is not None and arr.shape != (length,):
        raise ShapeError(f"{role} must have shape ({length},), got {arr.shape}", node.id)


# -- footprints ---------------------------------------------------------------

def param_count(model):
    per_node = {nid: int(sum(model.params[name].size for name in model.nodes[nid].params.values()))
                for nid in model.topo_order()}
    return Footprint(per_node, sum(per_node.values()))


def flops_estimate(model):
    """Per-sample operation counts.

    Conv: 2*Cin*kh*kw*Cout*Hout*Wout (Cin = 1 for depthwise); Linear:
    2*in*out*H*W; BatchNorm: 2 per element; ReLU: 1 per element; Add:
    (inputs - 1) per element; pools: window size per output element;
    Concat, upsample, Input and Output: 0.
    """
    shapes = model.infer_shapes(batch=1)
    per_node = {}
    for nid in model.topo_order():
        node = model.nodes[nid]
        out = shapes[nid]
        elems = int(np.prod(out.dims))
        if node.op in ("Conv2d", "DepthwiseConv2d"):
            cout, cin, kh, kw = model.param(nid, "weight").shape
            f = 2 * cin * kh * kw * elems
        elif node.op == "Linear":
            f = 2 * model.param(nid, "weight").shape[1] * elems
        elif node.op == "BatchNorm":
            f = 2 * elems
        elif node.op == "ReLU":
            f = elems
        elif node.op == "Add":
            f = (len(node.inputs) - 1) * elems
        elif node.op in ("MaxPool", "AvgPool"):
            if node.attrs.get("global", False):
                f = int(np.prod(shapes[node.inputs[0]].dims))
            else:
                kh, kw = _pair(node.attrs.get("kernel", 2))
                f = kh * kw * elems
        else:
            f = 0
        per_node[nid] = int(f)
    return Footprint(per_node, sum(per_node.values()))


# -- container I/O ------------------------------------------------------------

def save_model(model, path):
    """Write ``graph.json`` + ``weights.bin`` into directory ``path`` atomically."""
    path = Path(path)
    desc, blob = model.graph_json()
    parent = path.parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=parent))
    try:
        (tmp / "graph.json").write_text(json.dumps(desc, indent=1) + "\n")
        (tmp / "weights.bin").write_bytes(blob)
        _replace_dir(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _replace_dir(src, dst):
    if dst.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{dst.name}.old.", dir=dst.parent))
        os.rmdir(old)
        os.replace(dst, old)
        os.replace(src, dst)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(src, dst)


def load_model(path):
    path = Path(path)
    try:
        desc = json.loads((path / "graph.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing container file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"graph.json is not valid JSON: {e}") from e
    if desc.get("format") != MODEL_FORMAT:
        raise FormatError(f"unsupported format {desc.get('format')!r}, expected {MODEL_FORMAT!r}")
    expected = sum(4 * int(np.prod(p["shape"], dtype=np.int64)) for p in desc["params"])
    if expected != len(blob):
        raise FormatError(f"blob length mismatch: graph declares {expected} bytes, weights.bin has {len(blob)}")
    params = {}
    for p in desc["params"]:
        n = int(np.prod(p["shape"], dtype=np.int64))
        off = int(p["offset"])
        if off < 0 or off + 4 * n > len(blob):
            raise FormatError(f"parameter {p['name']!r} offset out of range")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        params[p["name"]] = arr.astype(np.float32).reshape(p["shape"])
    nodes = [NodeSpec.from_json(d) for d in desc["nodes"]]
    declared = sorted(tuple(e) for e in desc.get("edges", []))
    implied = sorted((src, n.id) for n in nodes for src in n.inputs)
    if declared != implied:
        raise FormatError("edge list disagrees with node inputs")
    return ModelGraph(nodes, params, desc["input_shape"])
