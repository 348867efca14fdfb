import pathlib
import sys

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))  # makes `import oracles` work

from dpuflow import graph as graph_mod

REPO = pathlib.Path(__file__).resolve().parent.parent
MODELS = REPO / "models"
TARGETS = REPO / "targets"
SCENARIOS = REPO / "scenarios"
GOLDEN = pathlib.Path(__file__).resolve().parent / "golden"


@pytest.fixture
def repo_paths():
    return {"models": MODELS, "targets": TARGETS, "scenarios": SCENARIOS, "golden": GOLDEN}


def random_chain_doc(rng, max_hw=8, max_c=4, name="rand"):
    """Small random conv chain document for fuzz-style comparisons.

    Keeps spatial sizes tiny so the scalar oracles stay fast. Always ends in
    a shape the executors accept; may include batchnorm, relu, maxpool and a
    gap+dense head.
    """
    h = int(rng.integers(5, max_hw + 1))
    c_in = int(rng.integers(1, max_c + 1))
    doc = {
        "format": "model",
        "format_version": 1,
        "name": name,
        "input_shape": [1, c_in, h, h],
        "init_seed": int(rng.integers(0, 2**31)),
        "layers": [],
    }
    layers = doc["layers"]
    cur_h, cur_c = h, c_in
    n_convs = int(rng.integers(1, 4))
    for i in range(n_convs):
        k = int(rng.choice([1, 3]))
        s = int(rng.choice([1, 2])) if cur_h >= 4 else 1
        pad = int(rng.integers(0, 2)) if k > 1 else 0
        out_h = (cur_h + 2 * pad - k) // s + 1
        if out_h < 2:
            s, pad = 1, (k // 2)
            out_h = (cur_h + 2 * pad - k) // s + 1
        c_out = int(rng.integers(1, max_c + 1))
        layers.append({"id": "c%d" % i, "kind": "conv2d", "k": k, "s": s, "pad": pad, "c_out": c_out})
        if rng.random() < 0.5:
            layers.append({"id": "b%d" % i, "kind": "batchnorm"})
        if rng.random() < 0.7:
            layers.append({"id": "r%d" % i, "kind": "relu"})
        cur_h, cur_c = out_h, c_out
    if cur_h >= 2 and rng.random() < 0.4:
        layers.append({"id": "mp", "kind": "maxpool", "k": 2, "s": 2})
        cur_h = (cur_h - 2) // 2 + 1
    layers.append({"id": "gap", "kind": "globalavgpool"})
    layers.append({"id": "fc", "kind": "dense", "out_features": int(rng.integers(2, 6))})
    return doc


def random_chain(rng, **kw):
    return graph_mod.build_graph(random_chain_doc(rng, **kw))


def random_images(rng, graph, count, scale=1.0):
    shape = (count,) + graph.input_shape.astuple()[1:]
    return (rng.random(shape, dtype=np.float32) * 2.0 - 1.0) * scale
