import numpy as np
import pytest

from dpuflow import graph as G
from dpuflow.errors import ContainerError, GraphValidationError

from conftest import random_chain_doc


def _doc(layers, shape=(1, 3, 32, 32), seed=7):
    return {"format": "model", "input_shape": list(shape), "init_seed": seed, "layers": layers}


def test_conv_output_shape_floor():
    # floor((32 + 0 - 5) / 2) + 1 = 14
    assert G.conv_out_hw(32, 32, 5, 2, 0) == (14, 14)
    assert G.conv_out_hw(32, 32, 3, 1, 1) == (32, 32)
    assert G.conv_out_hw(7, 7, 2, 2, 0) == (3, 3)


def test_param_count_conv_and_bn_and_dense():
    g = G.build_graph(_doc([
        {"id": "c", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 16},
        {"id": "b", "kind": "batchnorm"},
        {"id": "g", "kind": "globalavgpool"},
        {"id": "d", "kind": "dense", "out_features": 10},
    ]))
    # conv 3*3*3*16 + 16 = 448, bn 4*16 = 64, dense 16*10 + 10 = 170
    assert G.count_params(g) == 448 + 64 + 170


def test_op_counts_per_category():
    g = G.build_graph(_doc([
        {"id": "c", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 16},
        {"id": "r", "kind": "relu"},
        {"id": "m", "kind": "maxpool", "k": 2, "s": 2},
        {"id": "g", "kind": "globalavgpool"},
        {"id": "d", "kind": "dense", "out_features": 10},
    ]))
    counts = G.count_ops(g)
    per = {lid: ops for lid, _, _, ops in counts.per_layer}
    assert per["c"] == 2 * 3 * 3 * 3 * 16 * 32 * 32  # 884736
    assert per["r"] == 16 * 32 * 32
    assert per["m"] == 16 * 16 * 16 * 4
    assert per["g"] == 16 * 16 * 16
    assert per["d"] == 2 * 16 * 10
    assert counts.by_category["conv"] == per["c"]
    assert counts.by_category["eltwise"] == per["r"]
    assert counts.by_category["pool"] == per["m"] + per["g"]
    assert counts.total == sum(per.values())


def test_shape_inference_chain():
    g = G.build_graph(_doc([
        {"id": "c1", "kind": "conv2d", "k": 5, "s": 2, "pad": 0, "c_out": 8},
        {"id": "m", "kind": "maxpool", "k": 2, "s": 2},
        {"id": "g", "kind": "globalavgpool"},
        {"id": "d", "kind": "dense", "out_features": 4},
    ]))
    shapes = G.infer_shapes(g)
    assert shapes["c1"].astuple() == (1, 8, 14, 14)
    assert shapes["m"].astuple() == (1, 8, 7, 7)
    assert shapes["g"].astuple() == (1, 8, 1, 1)
    assert shapes["d"].astuple() == (1, 4, 1, 1)


def test_init_seed_is_deterministic():
    doc = _doc([{"id": "c", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 4}])
    g1, g2 = G.build_graph(doc), G.build_graph(doc)
    assert np.array_equal(g1.layer("c").spec.weight, g2.layer("c").spec.weight)
    assert np.array_equal(g1.layer("c").spec.bias, g2.layer("c").spec.bias)


def test_validation_collects_all_problems():
    doc = _doc([
        {"id": "c1", "kind": "conv2d", "k": 0, "s": 1, "pad": -1, "c_out": 4},
        {"id": "c2", "kind": "mystery"},
        {"id": "d", "kind": "dense", "out_features": 10, "in_features": 999},
    ])
    with pytest.raises(GraphValidationError) as err:
        G.build_graph(doc)
    text = str(err.value)
    assert "k must be" in text
    assert "pad must be" in text
    assert "unknown kind" in text
    assert "in_features 999" in text
    assert len(err.value.diagnostics) >= 4


def test_duplicate_layer_id_rejected():
    doc = _doc([
        {"id": "a", "kind": "relu"},
        {"id": "a", "kind": "relu"},
    ])
    with pytest.raises(GraphValidationError, match="duplicate layer id"):
        G.build_graph(doc)


def test_branching_edges_rejected():
    doc = _doc([
        {"id": "a", "kind": "relu"},
        {"id": "b", "kind": "relu"},
        {"id": "c", "kind": "relu"},
    ])
    doc["edges"] = [["a", "b"], ["a", "c"]]
    with pytest.raises(GraphValidationError, match="more than one consumer"):
        G.build_graph(doc)


def test_cycle_rejected():
    doc = _doc([
        {"id": "a", "kind": "relu"},
        {"id": "b", "kind": "relu"},
    ])
    doc["edges"] = [["a", "b"], ["b", "a"]]
    with pytest.raises(GraphValidationError, match="entry layer"):
        G.build_graph(doc)


def test_edges_define_order():
    doc = _doc([
        {"id": "late", "kind": "globalavgpool"},
        {"id": "early", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 4},
    ])
    doc["edges"] = [["early", "late"]]
    g = G.build_graph(doc)
    assert [l.id for l in g.layers] == ["early", "late"]


def test_pool_window_too_large_rejected():
    doc = _doc([{"id": "m", "kind": "maxpool", "k": 64, "s": 1}])
    with pytest.raises(GraphValidationError, match="exceeds input"):
        G.build_graph(doc)


def test_collapsing_conv_rejected():
    doc = _doc([{"id": "c", "kind": "conv2d", "k": 5, "s": 1, "pad": 0, "c_out": 2}],
               shape=(1, 1, 4, 4))
    with pytest.raises(GraphValidationError, match="collapses"):
        G.build_graph(doc)


def test_missing_params_without_seed_rejected():
    doc = _doc([{"id": "c", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 4}], seed=None)
    doc.pop("init_seed")
    with pytest.raises(GraphValidationError, match="no stored tensor"):
        G.build_graph(doc)


def test_unclaimed_tensor_rejected():
    doc = _doc([{"id": "c", "kind": "conv2d", "k": 1, "s": 1, "pad": 0, "c_out": 2}])
    with pytest.raises(GraphValidationError, match="does not belong"):
        G.build_graph(doc, tensors={"ghost.weight": np.zeros((2, 3, 1, 1), np.float32)})


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    g = G.build_graph(random_chain_doc(rng))
    path = G.save_graph(g, tmp_path / "m.json")
    g2 = G.load_graph(path)
    assert [l.id for l in g2.layers] == [l.id for l in g.layers]
    assert G.count_params(g2) == G.count_params(g)
    for l1, l2 in zip(g.layers, g2.layers):
        if l1.kind in ("conv2d", "dense"):
            assert np.array_equal(l1.spec.weight, l2.spec.weight)
            assert np.array_equal(l1.spec.bias, l2.spec.bias)


def test_load_checks_stated_param_count(tmp_path):
    g = G.build_graph(_doc([{"id": "c", "kind": "conv2d", "k": 1, "s": 1, "pad": 0, "c_out": 2}]))
    path = G.save_graph(g, tmp_path / "m.json")
    import json

    doc = json.loads(path.read_text())
    doc["params"] = 12345
    path.write_text(json.dumps(doc))
    with pytest.raises(ContainerError, match="parameters"):
        G.load_graph(path)
