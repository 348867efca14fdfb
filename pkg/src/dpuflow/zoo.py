"""Example architectures shipped with the toolchain.

Three linear CIFAR-10 chains, frozen as manifest documents with fixed init
seeds so the shipped JSON files stay tiny and fully reproducible:

  testnet8      2 convs, seed 42. Small enough for exhaustive numeric tests
                and the committed fp32-vs-INT8 agreement check.
  backbone35    35 convs (k3 plus a k5 stem), channels 24/40/80, 322,050
                parameters counting batchnorm as 4 values per channel.
  classifier52  52 convs (k1/k3/k5, channels up to 160 plus a final 1x1 to
                1280), 3,119,994 parameters, global average pool head.

Every conv is followed by batchnorm and relu, so the folding and fusion
passes have real work on all shipped models, and every chain ends with a
trailing softmax the compiler moves to the host.
"""

from . import graph

_COUNTER = 0


def _reset_ids():
    global _COUNTER
    _COUNTER = 0


def _block(layers, c_out, k, s, pad, bn=True, relu=True):
    """conv [+ batchnorm] [+ relu], ids numbered in chain order."""
    global _COUNTER
    _COUNTER += 1
    i = _COUNTER
    layers.append({"id": "conv%d" % i, "kind": "conv2d", "k": k, "s": s, "pad": pad, "c_out": c_out})
    if bn:
        layers.append({"id": "bn%d" % i, "kind": "batchnorm"})
    if relu:
        layers.append({"id": "relu%d" % i, "kind": "relu"})


def _head(layers, out_features, softmax=True):
    layers.append({"id": "gap", "kind": "globalavgpool"})
    layers.append({"id": "fc", "kind": "dense", "out_features": out_features})
    if softmax:
        layers.append({"id": "prob", "kind": "softmax"})


def testnet8():
    _reset_ids()
    layers = []
    _block(layers, 8, k=3, s=1, pad=1)
    _block(layers, 16, k=3, s=2, pad=1)
    layers.append({"id": "pool", "kind": "maxpool", "k": 2, "s": 2})
    _head(layers, 10, softmax=False)
    return {
        "format": "model",
        "format_version": 1,
        "name": "testnet8",
        "input_shape": [1, 3, 32, 32],
        "init_seed": 42,
        "layers": layers,
    }


def backbone35():
    _reset_ids()
    layers = []
    _block(layers, 24, k=5, s=1, pad=2)  # stem
    for _ in range(20):
        _block(layers, 24, k=3, s=1, pad=1)
    _block(layers, 40, k=3, s=2, pad=1)  # 32 -> 16
    for _ in range(12):
        _block(layers, 40, k=3, s=1, pad=1)
    _block(layers, 80, k=3, s=2, pad=1)  # 16 -> 8
    _head(layers, 10)
    return {
        "format": "model",
        "format_version": 1,
        "name": "backbone35",
        "input_shape": [1, 3, 32, 32],
        "init_seed": 1,
        "layers": layers,
    }


def classifier52():
    _reset_ids()
    layers = []
    _block(layers, 32, k=3, s=1, pad=1)  # stem, 32x32
    _block(layers, 48, k=3, s=2, pad=1)  # 16x16
    for j in range(10):
        _block(layers, 48, k=3 if j < 3 else 1, s=1, pad=1 if j < 3 else 0)
    _block(layers, 64, k=5, s=2, pad=2)  # 8x8
    for j in range(13):
        _block(layers, 64, k=3 if j < 9 else 1, s=1, pad=1 if j < 9 else 0)
    _block(layers, 96, k=3, s=2, pad=1)  # 4x4
    for j in range(13):
        _block(layers, 96, k=3 if j < 12 else 1, s=1, pad=1 if j < 12 else 0)
    _block(layers, 160, k=1, s=1, pad=0)
    for j in range(10):
        _block(layers, 160, k=3 if j < 5 else 1, s=1, pad=1 if j < 5 else 0)
    _block(layers, 1280, k=1, s=1, pad=0)  # feature head
    _head(layers, 10)
    return {
        "format": "model",
        "format_version": 1,
        "name": "classifier52",
        "input_shape": [1, 3, 32, 32],
        "init_seed": 2,
        "layers": layers,
    }


ARCHITECTURES = {
    "testnet8": testnet8,
    "backbone35": backbone35,
    "classifier52": classifier52,
}


def build(name):
    if name not in ARCHITECTURES:
        raise KeyError("unknown architecture %r, have: %s" % (name, ", ".join(sorted(ARCHITECTURES))))
    return graph.build_graph(ARCHITECTURES[name]())
