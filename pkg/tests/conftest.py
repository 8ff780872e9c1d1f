import numpy as np
import pytest

from prunekit.toy import GraphBuilder, random_batch


def chain_model(seed=0):
    """Input -> Conv(3->8) -> ReLU -> Conv(8->4) -> Output, 3x3 kernels with bias."""
    b = GraphBuilder((1, 3, 8, 8), seed)
    x = b.input()
    x = b.conv(x, 8, name="conv1")
    x = b.relu(x, name="relu1")
    x = b.conv(x, 4, name="conv2")
    b.output(x, name="out")
    return b.build()


def resblock_model(seed=0):
    """Residual block in the style of the gated-group illustration.

    Pruning target ``l4-``; the closure covers l1..l8 and only ``l8`` has
    no other member downstream.
    """
    b = GraphBuilder((2, 3, 8, 8), seed)
    x = b.input()
    l1 = b.conv(x, 8, name="l1")
    l2 = b.bn(l1, name="l2")
    l3 = b.relu(l2, name="l3")
    l4 = b.conv(l3, 8, name="l4")
    l5 = b.bn(l4, name="l5")
    l6 = b.add([l5, l3], name="l6")
    l7 = b.relu(l6, name="l7")
    l8 = b.conv(l7, 4, name="l8")
    b.output(l8, name="out")
    return b.build()


def unit_model(weights=(1.0, 2.0), gate_bias=None):
    """Producer emits constant 1 on every channel of a single pixel; gate is a 1x1 conv."""
    n = len(weights)
    b = GraphBuilder((1, 1, 1, 1), 0)
    x = b.input()
    p = b.conv(x, n, k=1, weight=np.zeros((n, 1, 1, 1)), bias_value=1.0, name="producer")
    g = b.conv(p, 1, k=1, weight=np.asarray(weights).reshape(1, n, 1, 1),
               bias=gate_bias is not None, bias_value=gate_bias, name="gate")
    b.output(g, name="out")
    return b.build()


def concat_model(seed=0):
    """Concat([A: 4ch, B: 3ch]) -> Conv."""
    b = GraphBuilder((1, 3, 6, 6), seed)
    x = b.input()
    a = b.conv(x, 4, name="A")
    bb = b.conv(x, 3, name="B")
    c = b.concat([a, bb], name="cat")
    y = b.conv(c, 5, name="conv")
    b.output(y, name="out")
    return b.build()


def depthwise_model(seed=0):
    b = GraphBuilder((2, 3, 8, 8), seed)
    x = b.input()
    c1 = b.conv(x, 6, name="conv1")
    d = b.dwconv(c1, name="dw")
    c2 = b.conv(d, 4, name="conv2")
    b.output(c2, name="out")
    return b.build()


def residual_stack(seed=0, blocks=3):
    """conv0 followed by ``blocks`` residual adds sharing one channel axis."""
    b = GraphBuilder((1, 3, 8, 8), seed)
    x = b.conv(b.input(), 6, name="conv0")
    for i in range(blocks):
        y = b.conv(b.relu(x), 6, name=f"res{i}")
        x = b.add([x, y], name=f"add{i}")
    b.output(b.conv(x, 2, k=1, name="head"), name="out")
    return b.build()


def parallel_model(seed=0):
    """One producer feeding two terminal consumers."""
    b = GraphBuilder((1, 3, 6, 6), seed)
    x = b.input()
    p = b.conv(x, 5, name="conv1")
    c2 = b.conv(p, 3, name="conv2")
    c3 = b.conv(p, 2, name="conv3")
    b.output(c2, name="out2")
    b.output(c3, name="out3")
    return b.build()


def linear_chain(seed=0):
    """Convolutions only, so channel contributions add up exactly."""
    b = GraphBuilder((2, 2, 5, 5), seed)
    x = b.conv(b.input(), 6, name="conv1")
    x = b.conv(x, 3, name="conv2")
    b.output(x, name="out")
    return b.build()


@pytest.fixture
def chain():
    return chain_model()


@pytest.fixture
def resblock():
    return resblock_model()


@pytest.fixture
def calib_for():
    def make(model, seed=0, n=None):
        shape = model.input_shape.dims if n is None else (n,) + model.input_shape.dims[1:]
        return random_batch(shape, seed)
    return make


def selection_model(seed):
    """Small model whose first group has extent 4..10, with a seed-chosen pass-through style."""
    rng = np.random.default_rng(seed)
    width = int(rng.integers(4, 11))
    b = GraphBuilder((2, 3, 6, 6), seed)
    x = b.conv(b.input(), width, name="producer")
    style = seed % 4
    if style == 1:
        x = b.relu(b.bn(x))
    elif style == 2:
        x = b.add([x, b.conv(b.relu(x), width)])
    elif style == 3:
        x = b.relu(b.dwconv(x))
    heads = [b.conv(x, int(rng.integers(2, 5)), name="gate")]
    if seed % 5 == 0:
        heads.append(b.conv(x, 2, k=1, name="gate2"))
    for i, h in enumerate(heads):
        b.output(h, name=f"out{i}")
    return b.build()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
