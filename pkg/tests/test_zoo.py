import numpy as np
import pytest

from dpuflow import graph as G
from dpuflow import zoo


def _conv_count(g):
    return sum(1 for l in g.layers if l.kind == "conv2d")


def test_testnet8_structure():
    g = zoo.build("testnet8")
    assert g.name == "testnet8"
    assert g.init_seed == 42
    assert _conv_count(g) == 2
    assert [l.kind for l in g.layers] == [
        "conv2d", "batchnorm", "relu",
        "conv2d", "batchnorm", "relu",
        "maxpool", "globalavgpool", "dense",
    ]
    shapes = G.infer_shapes(g)
    assert shapes["conv1"].astuple() == (1, 8, 32, 32)
    assert shapes["conv2"].astuple() == (1, 16, 16, 16)
    assert shapes["pool"].astuple() == (1, 16, 8, 8)
    assert shapes["fc"].astuple() == (1, 10, 1, 1)


def test_backbone35_frozen_counts():
    g = zoo.build("backbone35")
    assert _conv_count(g) == 35
    assert G.count_params(g) == 322050
    assert g.layers[-1].kind == "softmax"
    ks = {l.spec.k for l in g.layers if l.kind == "conv2d"}
    assert ks == {3, 5}


def test_classifier52_frozen_counts():
    g = zoo.build("classifier52")
    assert _conv_count(g) == 52
    assert G.count_params(g) == 3119994
    assert g.layers[-1].kind == "softmax"
    ks = {l.spec.k for l in g.layers if l.kind == "conv2d"}
    assert ks == {1, 3, 5}
    last_conv = [l for l in g.layers if l.kind == "conv2d"][-1]
    assert last_conv.spec.c_out == 1280 and last_conv.spec.k == 1


def test_every_conv_has_batchnorm_and_relu_in_big_models():
    for name in ("backbone35", "classifier52"):
        doc = zoo.ARCHITECTURES[name]()
        kinds = [l["kind"] for l in doc["layers"]]
        for i, k in enumerate(kinds):
            if k == "conv2d":
                assert kinds[i + 1] == "batchnorm" and kinds[i + 2] == "relu"


def test_seeded_init_is_deterministic():
    a = zoo.build("testnet8")
    b = zoo.build("testnet8")
    for la, lb in zip(a.layers, b.layers):
        if la.kind == "conv2d":
            assert np.array_equal(la.spec.weight, lb.spec.weight)
            assert np.array_equal(la.spec.bias, lb.spec.bias)


def test_shapes_infer_cleanly_for_all():
    for name in zoo.ARCHITECTURES:
        g = zoo.build(name)
        shapes = G.infer_shapes(g)
        assert shapes[g.layers[-1].id].c == 10


def test_unknown_architecture():
    with pytest.raises(KeyError, match="unknown architecture"):
        zoo.build("resnet50")
