"""Channel dependency graph, pruning groups and DOT export.

Every node contributes channel axes ``(layer, side)``: the output side
``+`` and, for everything but Input, the input side ``-``.  Coupling edges:

* inter-layer: producer ``p+`` <-> consumer ``c-`` (identity; offset map
  into a Concat input axis);
* intra-layer: ``-`` <-> ``+`` for ops that pass channels through
  (BatchNorm, ReLU, Add, Concat, pools, upsample, depthwise conv).

Conv2d and Linear keep their two axes independent.  A group is the set of
axes reached from a root axis by composing the edge maps; the maps can be
partial, since a Concat axis is shared between several producer groups.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .ir import TIED_OPS, ModelError
from .engine import IN, OUT


class GroupError(ValueError):
    pass


class ExcludedTargetError(GroupError):
    pass


@dataclass(frozen=True, order=True)
class PrunableDim:
    layer: str
    side: str
    extent: int = field(compare=False)

    @property
    def key(self):
        return (self.layer, self.side)

    def __str__(self):
        return f"{self.layer}{self.side}"


@dataclass(frozen=True, order=True)
class IndexMap:
    """Affine partial map ``k -> dst_start + (k - src_start)`` on ``[src_start, src_start + length)``."""

    src_start: int
    dst_start: int
    length: int

    @classmethod
    def identity(cls, n):
        return cls(0, 0, n)

    def __call__(self, k):
        if not self.src_start <= k < self.src_start + self.length:
            raise KeyError(k)
        return self.dst_start + (k - self.src_start)

    def covers(self, k):
        return self.src_start <= k < self.src_start + self.length

    def inverse(self):
        return IndexMap(self.dst_start, self.src_start, self.length)

    def compose(self, then):
        """``then`` applied after ``self``; None when the ranges do not meet."""
        lo = max(self.dst_start, then.src_start)
        hi = min(self.dst_start + self.length, then.src_start + then.length)
        if lo >= hi:
            return None
        return IndexMap(self.src_start + (lo - self.dst_start), then.dst_start + (lo - then.src_start), hi - lo)

    def restrict(self, start, stop):
        """Same map with its domain cut to ``[start, stop)``."""
        lo = max(self.src_start, start)
        hi = min(self.src_start + self.length, stop)
        if lo >= hi:
            return None
        return IndexMap(lo, self.dst_start + (lo - self.src_start), hi - lo)


@dataclass(frozen=True)
class Edge:
    src: tuple
    dst: tuple
    map: IndexMap
    kind: str  # "inter" or "intra"


class DepGraph:
    def __init__(self, model, dims, edges, excluded):
        self.model = model
        self.dims = dims            # key -> PrunableDim, deterministic order
        self.edges = edges
        self.excluded = excluded    # keys never prunable
        self.adj = {k: [] for k in dims}
        for e in edges:
            self.adj[e.src].append((e.dst, e.map, e.kind))
            self.adj[e.dst].append((e.src, e.map.inverse(), e.kind))
        order = model.topo_order()
        self._node_pos = {nid: i for i, nid in enumerate(order)}

    def dim(self, layer, side):
        return self.dims[(layer, side)]

    def sort_key(self, key):
        layer, side = key
        return (self._node_pos[layer], 0 if side == IN else 1, layer)


def build_depgraph(model):
    shapes = model.infer_shapes()
    dims = {}
    edges = []
    excluded = set()
    for nid in model.topo_order():
        node = model.nodes[nid]
        if node.op not in TIED_OPS and node.op not in ("Input", "Output", "Conv2d", "Linear"):
            raise ModelError(f"unsupported op kind {node.op!r}", nid)
        if node.op != "Input":
            if node.op == "Concat":
                cin = sum(shapes[s].channels for s in node.inputs)
            else:
                cin = shapes[node.inputs[0]].channels
            dims[(nid, IN)] = PrunableDim(nid, IN, cin)
        if node.op != "Output":
            dims[(nid, OUT)] = PrunableDim(nid, OUT, shapes[nid].channels)
        if node.op == "Input":
            excluded.add((nid, OUT))
        if node.op == "Output":
            excluded.add((nid, IN))
        offset = 0
        for src in node.inputs:
            c = shapes[src].channels
            if node.op == "Concat":
                m = IndexMap(0, offset, c)
                offset += c
            else:
                m = IndexMap.identity(c)
            edges.append(Edge((src, OUT), (nid, IN), m, "inter"))
        if node.op in TIED_OPS:
            edges.append(Edge((nid, IN), (nid, OUT), IndexMap.identity(shapes[nid].channels), "intra"))
    return DepGraph(model, dims, edges, excluded)


@dataclass
class PruningGroup:
    """Coupled channel axes addressed through one root index space.

    ``members`` maps an axis key to the maps from root indices to that
    axis's channel indices (several maps when one axis sees the same root
    channel twice, e.g. a Concat of a tensor with itself).
    """

    root: PrunableDim
    extent: int
    members: dict
    order: list
    root_offset: int = 0

    @property
    def key(self):
        return f"{self.root.layer}{self.root.side}@{self.root_offset}"

    @property
    def layers(self):
        seen = []
        for layer, _ in self.order:
            if layer not in seen:
                seen.append(layer)
        return seen

    def member_indices(self, key, channels):
        out = set()
        for m in self.members.get(key, ()):
            for c in channels:
                if m.covers(c):
                    out.add(m(c))
        return sorted(out)

    def removals(self, channels):
        """``{axis key: sorted channel indices}`` removed together with root ``channels``."""
        channels = sorted(set(int(c) for c in channels))
        if channels and (channels[0] < 0 or channels[-1] >= self.extent):
            raise GroupError(f"channel index out of range for group {self.key} of extent {self.extent}")
        out = {}
        for key in self.order:
            idx = self.member_indices(key, channels)
            if idx:
                out[key] = idx
        return out

    def __str__(self):
        return f"group {self.key} (extent {self.extent}, {len(self.order)} axes)"


def _closure(dg, root_key, maps):
    """Fixpoint of map composition from ``root_key`` seeded with ``maps``."""
    members = {root_key: set(maps)}
    queue = deque((root_key, m) for m in maps)
    while queue:
        key, m = queue.popleft()
        for nxt, edge_map, _ in dg.adj[key]:
            composed = m.compose(edge_map)
            if composed is None:
                continue
            bucket = members.setdefault(nxt, set())
            if composed not in bucket:
                bucket.add(composed)
                queue.append((nxt, composed))
    return members


def _make_group(dg, root_key, start, stop):
    root = dg.dims[root_key]
    n = stop - start
    seed = IndexMap(0, start, n)
    raw = _closure(dg, root_key, [seed])
    members = {}
    for key, maps in raw.items():
        members[key] = sorted(_merge(maps))
    own = members[root_key]
    if own != [seed]:
        raise GroupError(f"axis {root} is coupled to itself at shifted indices; unsupported topology")
    for key, maps in members.items():
        for m in maps:
            if m.dst_start < 0 or m.dst_start + m.length > dg.dims[key].extent:
                raise GroupError(f"extent mismatch along coupling path at {dg.dims[key]}")
    order = sorted(members, key=dg.sort_key)
    return PruningGroup(root, n, members, order, start)


def _merge(maps):
    """Join adjacent maps that continue the same affine relation."""
    maps = sorted(maps)
    out = []
    for m in maps:
        if out:
            prev = out[-1]
            if (prev.src_start + prev.length == m.src_start
                    and prev.dst_start + prev.length == m.dst_start):
                out[-1] = IndexMap(prev.src_start, prev.dst_start, prev.length + m.length)
                continue
            if (m.src_start - prev.src_start == m.dst_start - prev.dst_start
                    and m.src_start < prev.src_start + prev.length):
                hi = max(prev.src_start + prev.length, m.src_start + m.length)
                out[-1] = IndexMap(prev.src_start, prev.dst_start, hi - prev.src_start)
                continue
        out.append(m)
    return out


def _excluded_channels(dg):
    """Channels (per axis) coupled to the model input or to any Output."""
    bad = {}
    for key in sorted(dg.excluded, key=dg.sort_key):
        ext = dg.dims[key].extent
        for k, maps in _closure(dg, key, [IndexMap.identity(ext)]).items():
            s = bad.setdefault(k, set())
            for m in maps:
                s.update(range(m.dst_start, m.dst_start + m.length))
    return bad


def collect_group(dg, target, channels=None):
    """Group reached from all channels of ``target`` (a PrunableDim or ``(layer, side)``)."""
    key = target.key if isinstance(target, PrunableDim) else tuple(target)
    if key not in dg.dims:
        raise GroupError(f"unknown axis {key}")
    if key in dg.excluded:
        raise ExcludedTargetError(f"axis {key[0]}{key[1]} is an external interface and cannot be pruned")
    start, stop = (0, dg.dims[key].extent) if channels is None else channels
    bad = _excluded_channels(dg).get(key, set())
    if any(start <= c < stop for c in bad):
        raise ExcludedTargetError(f"axis {key[0]}{key[1]} is coupled to a model input or output")
    return _make_group(dg, key, start, stop)


def enumerate_groups(dg):
    """Partition all prunable channels into groups, in deterministic order.

    Axes are visited in topological order (input side before output side);
    each maximal run of still-unassigned channels of an axis roots a group.
    Channels coupled to the model input or an Output are never grouped.
    """
    assigned = {k: set(v) for k, v in _excluded_channels(dg).items()}
    groups = []
    for key in sorted(dg.dims, key=dg.sort_key):
        ext = dg.dims[key].extent
        taken = assigned.setdefault(key, set())
        c = 0
        while c < ext:
            if c in taken:
                c += 1
                continue
            stop = c
            while stop < ext and stop not in taken:
                stop += 1
            g = _make_group(dg, key, c, stop)
            for k, maps in g.members.items():
                s = assigned.setdefault(k, set())
                for m in maps:
                    s.update(range(m.dst_start, m.dst_start + m.length))
            groups.append(g)
            c = stop
    return groups


def group_is_closed(dg, group):
    """One more round of rule application adds nothing."""
    for key, maps in group.members.items():
        for m in maps:
            for nxt, edge_map, _ in dg.adj[key]:
                composed = m.compose(edge_map)
                if composed is None:
                    continue
                have = group.members.get(nxt, [])
                for k in range(composed.src_start, composed.src_start + composed.length):
                    if not any(h.covers(k) and h(k) == composed(k) for h in have):
                        return False
    return True


# -- DOT ----------------------------------------------------------------------

def _q(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(dg, group=None, gates=()):
    """DOT digraph of the channel axes; group members filled, gate layers double-circled."""
    members = set(group.members) if group is not None else set()
    gates = set(gates)
    lines = ["digraph depgraph {", "  rankdir=LR;", "  node [shape=box, fontname=Helvetica];"]
    for key in sorted(dg.dims, key=dg.sort_key):
        d = dg.dims[key]
        op = dg.model.nodes[d.layer].op
        attrs = [f"label={_q(f'{d}  {op} [{d.extent}]')}"]
        if key in members:
            attrs.append('style=filled, fillcolor="#f4a6a6"')
            if d.layer in gates:
                attrs.append("shape=doublecircle")
        elif key in dg.excluded:
            attrs.append("style=dashed")
        lines.append(f"  {_q(d)} [{', '.join(attrs)}];")
    for e in dg.edges:
        a, b = dg.dims[e.src], dg.dims[e.dst]
        attrs = ["style=dashed"] if e.kind == "intra" else []
        if e.map.src_start or e.map.dst_start:
            attrs.append(f"label={_q(f'+{e.map.dst_start - e.map.src_start}')}")
        if e.src in members and e.dst in members:
            attrs.append("color=red")
        suffix = f" [{', '.join(attrs)}]" if attrs else ""
        lines.append(f"  {_q(a)} -> {_q(b)}{suffix};")
    lines.append("}")
    return "\n".join(lines) + "\n"
