import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prunekit.ir import (
    FormatError, ModelError, ModelGraph, NodeSpec, ShapeError, TensorShape,
    flops_estimate, load_model, param_count, save_model,
)
from prunekit.toy import GraphBuilder, ToyModelSpec, generate_toy, random_model

from conftest import chain_model


def test_load_chain_counts(tmp_path, chain):
    save_model(chain, tmp_path / "m")
    m = load_model(tmp_path / "m")
    assert len(m.nodes) == 5
    # 216 + 8 + 288 + 4
    assert param_count(m).total == 8 * 3 * 3 * 3 + 8 + 4 * 8 * 3 * 3 + 4 == 516


def test_short_blob_rejected(tmp_path, chain):
    save_model(chain, tmp_path / "m")
    blob = (tmp_path / "m" / "weights.bin").read_bytes()
    (tmp_path / "m" / "weights.bin").write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="blob length mismatch"):
        load_model(tmp_path / "m")


def test_inconsistent_weight_names_node(tmp_path):
    b = GraphBuilder((1, 3, 4, 4))
    x = b.input()
    b.nodes.append(NodeSpec("bad", "Conv2d", [x], {"padding": 1}, {"weight": "bad.weight"}))
    b.params["bad.weight"] = np.zeros((8, 4, 3, 3), np.float32)
    b.nodes.append(NodeSpec("out", "Output", ["bad"]))
    with pytest.raises(ShapeError) as e:
        b.build()
    assert e.value.node_id == "bad"


def _raw(nodes, params, shape=(1, 3, 4, 4)):
    return ModelGraph(nodes, params, shape)


def test_dangling_param_ref():
    with pytest.raises(ModelError, match="dangling"):
        _raw([NodeSpec("in", "Input"), NodeSpec("c", "Conv2d", ["in"], {}, {"weight": "nope"}),
              NodeSpec("out", "Output", ["c"])], {})


def test_cycle_detected():
    nodes = [NodeSpec("in", "Input"), NodeSpec("a", "ReLU", ["in", "b"]), NodeSpec("b", "ReLU", ["a"]),
             NodeSpec("out", "Output", ["b"])]
    with pytest.raises(ModelError, match="cycle"):
        _raw(nodes, {})


def test_non_channel_concat_rejected():
    nodes = [NodeSpec("in", "Input"), NodeSpec("c", "Concat", ["in", "in"], {"axis": 2}),
             NodeSpec("out", "Output", ["c"])]
    with pytest.raises(ModelError, match="channel-axis"):
        _raw(nodes, {})


def test_unknown_op_rejected():
    nodes = [NodeSpec("in", "Input"), NodeSpec("s", "Split", ["in"]), NodeSpec("out", "Output", ["s"])]
    with pytest.raises(ModelError, match="unsupported op"):
        _raw(nodes, {})


def test_requires_single_input_and_an_output():
    with pytest.raises(ModelError, match="Output"):
        _raw([NodeSpec("in", "Input")], {})
    with pytest.raises(ModelError, match="Input"):
        _raw([NodeSpec("a", "Input"), NodeSpec("b", "Input"), NodeSpec("o", "Output", ["a"]),
              NodeSpec("p", "Output", ["b"])], {})


def test_tensor_shape_rejects_zero():
    with pytest.raises(ShapeError):
        TensorShape((1, 0, 4, 4))


def test_wrong_format_version(tmp_path, chain):
    save_model(chain, tmp_path / "m")
    desc = json.loads((tmp_path / "m" / "graph.json").read_text())
    desc["format"] = "prunekit-model/0"
    (tmp_path / "m" / "graph.json").write_text(json.dumps(desc))
    with pytest.raises(FormatError, match="unsupported format"):
        load_model(tmp_path / "m")


def test_edge_list_must_match(tmp_path, chain):
    save_model(chain, tmp_path / "m")
    desc = json.loads((tmp_path / "m" / "graph.json").read_text())
    desc["edges"] = desc["edges"][:-1]
    (tmp_path / "m" / "graph.json").write_text(json.dumps(desc))
    with pytest.raises(FormatError, match="edge list"):
        load_model(tmp_path / "m")


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_bit_exact(tmp_path, seed):
    m = generate_toy(ToyModelSpec(seed=seed, widths=(8, 12), depth=5))
    save_model(m, tmp_path / "a")
    again = load_model(tmp_path / "a")
    save_model(again, tmp_path / "b")
    for f in ("graph.json", "weights.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert again.content_hash() == m.content_hash()
    for name, arr in m.params.items():
        assert again.params[name].tobytes() == arr.tobytes()


def test_save_overwrites_atomically(tmp_path, chain):
    save_model(chain, tmp_path / "m")
    save_model(chain_model(seed=3), tmp_path / "m")
    assert load_model(tmp_path / "m").content_hash() == chain_model(seed=3).content_hash()
    assert sorted(os.listdir(tmp_path)) == ["m"]


def test_save_unwritable(tmp_path, chain):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_model(chain, blocker / "m")


def test_infer_shapes_examples():
    b = GraphBuilder((1, 3, 32, 32))
    c = b.conv(b.input(), 8, k=3, stride=1, padding=1, name="c")
    b.output(c)
    assert b.build().infer_shapes()["c"].dims == (1, 8, 32, 32)

    b = GraphBuilder((1, 3, 16, 16))
    x = b.input()
    cat = b.concat([b.conv(x, 4), b.conv(x, 3)], name="cat")
    b.output(cat)
    assert b.build().infer_shapes()["cat"].dims == (1, 7, 16, 16)

    b = GraphBuilder((1, 3, 16, 16))
    x = b.input()
    a = b.conv(x, 8)
    d = b.conv(x, 8, stride=2)
    b.output(b.add([a, d], name="add"))
    with pytest.raises(ShapeError, match="spatial mismatch") as e:
        b.build()
    assert e.value.node_id == "add"


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 2, 1), (8, 3, 1, 0), (9, 5, 2, 2), (5, 1, 1, 0)])
def test_conv_output_size_formula(h, k, s, p):
    b = GraphBuilder((2, 3, h, h))
    c = b.conv(b.input(), 4, k=k, stride=s, padding=p, name="c")
    b.output(c)
    out = (h + 2 * p - k) // s + 1
    assert b.build().infer_shapes()["c"].dims == (2, 4, out, out)


def test_channel_mismatch_at_add():
    b = GraphBuilder((1, 3, 8, 8))
    x = b.input()
    b.output(b.add([b.conv(x, 4), b.conv(x, 5)], name="add"))
    with pytest.raises(ShapeError, match="channel mismatch"):
        b.build()


def test_param_count_examples():
    b = GraphBuilder((1, 3, 8, 8))
    c = b.conv(b.input(), 8, k=3, name="c")
    n = b.bn(c, name="bn")
    r = b.relu(n, name="r")
    b.output(r)
    pc = param_count(b.build())
    assert pc.per_node["c"] == 8 * 3 * 9 + 8 == 224
    assert pc.per_node["bn"] == 32
    assert pc.per_node["r"] == 0
    assert pc.total == sum(pc.per_node.values())


def test_param_count_matches_blob(tmp_path):
    for seed in range(10):
        m = random_model(seed)
        save_model(m, tmp_path / str(seed))
        size = (tmp_path / str(seed) / "weights.bin").stat().st_size
        assert param_count(m).total * 4 == size


def test_flops_examples():
    b = GraphBuilder((1, 3, 32, 32))
    c = b.conv(b.input(), 8, k=3, stride=1, padding=1, name="c")
    r = b.relu(c, name="r")
    b.output(r)
    fl = flops_estimate(b.build())
    assert fl.per_node["c"] == 2 * 3 * 9 * 8 * 32 * 32 == 442_368
    assert fl.per_node["r"] == 8_192


def test_flops_depthwise_uses_unit_multiplier():
    b = GraphBuilder((1, 4, 8, 8))
    d = b.dwconv(b.input(), k=3, name="d")
    b.output(d)
    assert flops_estimate(b.build()).per_node["d"] == 2 * 1 * 9 * 4 * 8 * 8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_footprints_nonnegative(seed):
    m = random_model(seed)
    pc, fl = param_count(m), flops_estimate(m)
    assert all(v >= 0 for v in pc.per_node.values())
    assert all(v >= 0 for v in fl.per_node.values())
    assert fl.total == sum(fl.per_node.values())
    indep = sum(int(np.prod(p.shape)) for p in m.params.values())
    assert pc.total == indep


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_shape_inference_deterministic(seed):
    a, b = random_model(seed), random_model(seed)
    assert {k: v.dims for k, v in a.infer_shapes().items()} == {k: v.dims for k, v in b.infer_shapes().items()}
