"""Seeded model builders: the toy generator behind ``gen-toy`` and random DAGs for tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ir import ModelGraph, NodeSpec

BLOCK_TYPES = ("plain", "residual", "concat", "depthwise", "updown")


class GraphBuilder:
    """Incremental model construction with seeded parameter initialisation.

    Builder methods take and return node ids; channel counts and spatial
    sizes are tracked so callers do not need to run shape inference.
    """

    def __init__(self, input_shape, seed=0):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.rng = np.random.default_rng(seed)
        self.nodes = []
        self.params = {}
        self.channels = {}
        self.spatial = {}
        self._count = {}

    def _id(self, op, name=None):
        if name is not None:
            return name
        k = self._count.get(op, 0) + 1
        self._count[op] = k
        return f"{op.lower()}{k}"

    def _add(self, op, inputs, channels, spatial, attrs=None, params=None, name=None):
        nid = self._id(op, name)
        refs = {}
        for role, arr in (params or {}).items():
            pname = f"{nid}.{role}"
            self.params[pname] = np.asarray(arr, dtype=np.float32)
            refs[role] = pname
        self.nodes.append(NodeSpec(nid, op, list(inputs), dict(attrs or {}), refs))
        self.channels[nid] = channels
        self.spatial[nid] = spatial
        return nid

    def input(self, name="input"):
        n, c, h, w = self.input_shape
        return self._add("Input", [], c, (h, w), name=name)

    def output(self, x, name=None):
        return self._add("Output", [x], self.channels[x], self.spatial[x], name=name)

    def conv(self, x, cout, k=3, stride=1, padding=None, bias=True, weight=None, bias_value=None, name=None):
        cin = self.channels[x]
        padding = k // 2 if padding is None else padding
        if weight is None:
            weight = self.rng.normal(0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
        weight = np.asarray(weight, dtype=np.float32).reshape(cout, cin, k, k)
        params = {"weight": weight}
        if bias:
            params["bias"] = (self.rng.normal(0, 0.05, cout) if bias_value is None
                              else np.broadcast_to(np.asarray(bias_value, dtype=np.float32), (cout,)))
        h, w = self.spatial[x]
        out = ((h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)
        return self._add("Conv2d", [x], cout, out, {"stride": stride, "padding": padding}, params, name)

    def dwconv(self, x, k=3, stride=1, bias=True, name=None):
        c = self.channels[x]
        params = {"weight": self.rng.normal(0, np.sqrt(2.0 / (k * k)), (c, 1, k, k))}
        if bias:
            params["bias"] = self.rng.normal(0, 0.05, c)
        pad = k // 2
        h, w = self.spatial[x]
        out = ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
        return self._add("DepthwiseConv2d", [x], c, out, {"stride": stride, "padding": pad}, params, name)

    def linear(self, x, cout, bias=True, name=None):
        cin = self.channels[x]
        params = {"weight": self.rng.normal(0, np.sqrt(1.0 / cin), (cout, cin))}
        if bias:
            params["bias"] = self.rng.normal(0, 0.05, cout)
        return self._add("Linear", [x], cout, self.spatial[x], None, params, name)

    def bn(self, x, eps=1e-5, name=None):
        c = self.channels[x]
        params = {
            "gamma": self.rng.uniform(0.5, 1.5, c),
            "beta": self.rng.normal(0, 0.1, c),
            "running_mean": self.rng.normal(0, 0.1, c),
            "running_var": self.rng.uniform(0.5, 1.5, c),
        }
        return self._add("BatchNorm", [x], c, self.spatial[x], {"eps": eps}, params, name)

    def relu(self, x, name=None):
        return self._add("ReLU", [x], self.channels[x], self.spatial[x], name=name)

    def add(self, xs, name=None):
        return self._add("Add", list(xs), self.channels[xs[0]], self.spatial[xs[0]], name=name)

    def concat(self, xs, name=None):
        return self._add("Concat", list(xs), sum(self.channels[x] for x in xs), self.spatial[xs[0]],
                         {"axis": 1}, name=name)

    def pool(self, x, kind="MaxPool", k=2, stride=None, name=None):
        stride = k if stride is None else stride
        h, w = self.spatial[x]
        out = ((h - k) // stride + 1, (w - k) // stride + 1)
        return self._add(kind, [x], self.channels[x], out, {"kernel": k, "stride": stride}, name=name)

    def global_pool(self, x, name=None):
        return self._add("AvgPool", [x], self.channels[x], (1, 1), {"global": True}, name=name)

    def upsample(self, x, factor=2, name=None):
        h, w = self.spatial[x]
        return self._add("UpsampleNearest", [x], self.channels[x], (h * factor, w * factor),
                         {"factor": factor}, name=name)

    def cbr(self, x, cout, k=3, stride=1):
        return self.relu(self.bn(self.conv(x, cout, k, stride, bias=False)))

    def build(self):
        return ModelGraph(self.nodes, self.params, self.input_shape)


@dataclass
class ToyModelSpec:
    seed: int = 0
    depth: int = 5
    widths: tuple = (32, 48)
    blocks: tuple = BLOCK_TYPES
    input_shape: tuple = (4, 3, 16, 16)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(self.blocks)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"channel widths must be >= 1, got {self.widths}")
        unknown = [b for b in self.blocks if b not in BLOCK_TYPES]
        if unknown or not self.blocks:
            raise ValueError(f"unknown block types {unknown}; choose from {BLOCK_TYPES}")
        if len(self.input_shape) != 4 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input shape must be four positive extents, got {self.input_shape}")
        if "updown" in self.blocks and (self.input_shape[2] % 2 or self.input_shape[3] % 2):
            raise ValueError("updown blocks need even spatial extents")


def generate_toy(spec):
    """Multi-scale toy network: stem, the requested blocks, then two heads.

    Blocks cycle through ``spec.blocks`` for ``max(depth, len(blocks))``
    repetitions so every requested type appears at least once.
    """
    b = GraphBuilder(spec.input_shape, spec.seed)
    x = b.cbr(b.input(), spec.widths[0])
    for i in range(max(spec.depth, len(spec.blocks))):
        kind = spec.blocks[i % len(spec.blocks)]
        w = spec.widths[i % len(spec.widths)]
        if kind == "plain":
            x = b.cbr(x, w)
        elif kind == "residual":
            c = b.channels[x]
            y = b.bn(b.conv(b.cbr(x, w), c, bias=False))
            x = b.relu(b.add([x, y]))
        elif kind == "concat":
            left = b.cbr(x, max(1, w // 2), k=1)
            right = b.cbr(x, max(1, w - w // 2), k=3)
            x = b.cbr(b.concat([left, right]), w, k=1)
        elif kind == "depthwise":
            y = b.relu(b.bn(b.dwconv(x)))
            x = b.cbr(y, w, k=1)
        else:  # updown: stride-2 branch, back up, fused with the skip
            down = b.cbr(x, w, stride=2)
            down = b.cbr(down, w)
            up = b.upsample(down)
            x = b.cbr(b.concat([x, up]), w, k=1)
    heat = b.conv(b.relu(b.conv(x, max(2, spec.widths[-1] // 2))), 2, k=1)
    b.output(heat, name="heatmap")
    emb = b.conv(x, 8, k=1)
    b.output(emb, name="embedding")
    return b.build()


def random_batch(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def random_model(seed, n_ops=None, max_width=8, spatial=8, batch=2):
    """A random valid DAG mixing every supported op; for property tests."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder((batch, int(rng.integers(1, 4)), spatial, spatial), seed + 1)
    pool = [b.input()]
    n_ops = int(rng.integers(4, 12)) if n_ops is None else n_ops

    def pick():
        # prefer recent tensors, allow older ones for fan-out
        i = len(pool) - 1 - int(min(rng.geometric(0.5) - 1, len(pool) - 1))
        return pool[i]

    for _ in range(n_ops):
        x = pick()
        kind = rng.choice(["conv", "conv", "cbr", "dw", "bn", "relu", "res", "cat", "updown", "linear"])
        h = b.spatial[x][0]
        if kind == "conv":
            k = int(rng.choice([1, 3]))
            y = b.conv(x, int(rng.integers(2, max_width + 1)), k=k, bias=bool(rng.integers(0, 2)))
        elif kind == "cbr":
            y = b.cbr(x, int(rng.integers(2, max_width + 1)), k=int(rng.choice([1, 3])))
        elif kind == "dw":
            y = b.dwconv(x, k=3, bias=bool(rng.integers(0, 2)))
        elif kind == "bn":
            y = b.bn(x)
        elif kind == "relu":
            y = b.relu(x)
        elif kind == "res":
            branch = b.conv(b.relu(x), b.channels[x], k=int(rng.choice([1, 3])))
            y = b.add([x, branch])
        elif kind == "cat":
            others = [t for t in pool if b.spatial[t] == b.spatial[x] and t != x]
            other = others[int(rng.integers(len(others)))] if others else b.conv(x, 2, k=1)
            y = b.concat([x, other] if rng.integers(0, 2) else [other, x])
            y = b.conv(y, int(rng.integers(2, max_width + 1)), k=1)
        elif kind == "updown" and h >= 4 and h % 2 == 0:
            down = b.pool(x, str(rng.choice(["MaxPool", "AvgPool"])))
            down = b.conv(down, b.channels[x], k=3)
            y = b.add([x, b.upsample(down)])
        else:
            y = b.linear(x, int(rng.integers(2, max_width + 1)))
        pool.append(y)

    consumed = {src for n in b.nodes for src in n.inputs}
    dangling = [t for t in pool if t not in consumed and b.nodes[0].id != t]
    for i, t in enumerate(dangling):
        if rng.integers(0, 2):
            t = b.conv(t, int(rng.integers(1, 4)), k=1)
        b.output(t, name=f"out{i}")
    return b.build()
