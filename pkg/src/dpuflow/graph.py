"""Linear CNN graph IR: layer specs, validation, shape/param/op accounting.

A model document is a JSON manifest (see ``build_graph``) plus optional tensor
payloads in the companion blob. Graphs are strictly linear chains in nchw
layout; anything non-chain is rejected at build time with every diagnostic
collected in one pass. Parameters either arrive as stored tensors or are
generated from ``init_seed`` so example models can ship as small manifests.
"""

import dataclasses
import math

import numpy as np

from . import container
from .errors import ContainerError, GraphValidationError

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool", "globalavgpool", "dense", "softmax")

# op-count categories used by the compiler and the reports
OP_CATEGORY = {
    "conv2d": "conv",
    "dense": "dense",
    "batchnorm": "eltwise",
    "relu": "eltwise",
    "softmax": "eltwise",
    "maxpool": "pool",
    "globalavgpool": "pool",
}


@dataclasses.dataclass(frozen=True)
class TensorShape:
    """nchw activation shape."""

    n: int
    c: int
    h: int
    w: int

    def numel(self):
        return self.n * self.c * self.h * self.w

    def astuple(self):
        return (self.n, self.c, self.h, self.w)

    @classmethod
    def from_any(cls, value):
        t = tuple(int(v) for v in value)
        if len(t) != 4:
            raise GraphValidationError(["input_shape must have 4 entries (n, c, h, w), got %r" % (value,)])
        return cls(*t)


@dataclasses.dataclass
class ConvSpec:
    k: int
    s: int
    pad: int
    c_in: int
    c_out: int
    weight: np.ndarray  # (c_out, c_in, k, k) fp32
    bias: np.ndarray  # (c_out,) fp32


@dataclasses.dataclass
class BatchNormSpec:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    @property
    def c(self):
        return int(self.gamma.shape[0])


@dataclasses.dataclass
class PoolSpec:
    k: int
    s: int


@dataclasses.dataclass
class DenseSpec:
    in_features: int
    out_features: int
    weight: np.ndarray  # (out_features, in_features) fp32
    bias: np.ndarray  # (out_features,) fp32


@dataclasses.dataclass
class Layer:
    id: str
    kind: str
    spec: object = None  # ConvSpec | BatchNormSpec | PoolSpec | DenseSpec | None


@dataclasses.dataclass
class ModelGraph:
    name: str
    input_shape: TensorShape
    layers: list  # chain order
    init_seed: int = None

    def layer(self, layer_id):
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise KeyError(layer_id)

    def kinds(self):
        return [l.kind for l in self.layers]


def conv_out_hw(h, w, k, s, pad):
    return ((h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1)


def _chain_order(entries, edges, diags):
    """Resolve edges into a single chain order, or report why that fails."""
    ids = [e["id"] for e in entries]
    if edges is None:
        return ids
    idset = set(ids)
    nxt, prv = {}, {}
    for e in edges:
        if not (isinstance(e, (list, tuple)) and len(e) == 2):
            diags.append("edge %r is not a [src, dst] pair" % (e,))
            continue
        src, dst = e
        for v in (src, dst):
            if v not in idset:
                diags.append("edge references unknown layer %r" % (v,))
        if src in nxt:
            diags.append("layer %r feeds more than one consumer (graphs must be chains)" % src)
        if dst in prv:
            diags.append("layer %r has more than one producer (graphs must be chains)" % dst)
        nxt[src], prv[dst] = dst, src
    if diags:
        return ids
    heads = [i for i in ids if i not in prv]
    if len(heads) != 1:
        diags.append("graph must have exactly one entry layer, found %d" % len(heads))
        return ids
    order, seen, cur = [], set(), heads[0]
    while cur is not None and cur not in seen:
        order.append(cur)
        seen.add(cur)
        cur = nxt.get(cur)
    if cur is not None:
        diags.append("graph contains a cycle through layer %r" % cur)
    if len(order) != len(ids):
        diags.append("edges leave %d layer(s) unreachable from the entry" % (len(ids) - len(order)))
    return order if len(order) == len(ids) else ids


def _as_f32(name, value, shape, diags):
    arr = np.asarray(value, dtype=np.float32)
    if arr.shape != tuple(shape):
        diags.append("tensor %s has shape %r, expected %r" % (name, arr.shape, tuple(shape)))
        return np.zeros(shape, np.float32)
    return arr.copy()


def _init_conv(rng, c_in, c_out, k):
    std = math.sqrt(2.0 / (c_in * k * k))
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)
    b = rng.uniform(-0.05, 0.05, size=(c_out,)).astype(np.float32)
    return w, b


def _init_dense(rng, n_in, n_out):
    std = math.sqrt(2.0 / n_in)
    w = rng.normal(0.0, std, size=(n_out, n_in)).astype(np.float32)
    b = rng.uniform(-0.05, 0.05, size=(n_out,)).astype(np.float32)
    return w, b


def _init_bn(rng, c):
    return (
        rng.uniform(0.8, 1.2, size=(c,)).astype(np.float32),
        rng.normal(0.0, 0.05, size=(c,)).astype(np.float32),
        rng.normal(0.0, 0.1, size=(c,)).astype(np.float32),
        rng.uniform(0.5, 1.5, size=(c,)).astype(np.float32),
    )


def build_graph(document, tensors=None):
    """Build and validate a ModelGraph from a manifest dict.

    ``tensors`` maps stored parameter names (``<id>.weight`` etc) to arrays.
    Layers without stored parameters are initialized from ``init_seed``; a
    manifest with neither is rejected. All validation problems are collected
    and raised together as one GraphValidationError.
    """
    diags = []
    tensors = dict(tensors or {})
    name = str(document.get("name", "model"))
    seed = document.get("init_seed")
    rng = np.random.default_rng(int(seed)) if seed is not None else None

    try:
        input_shape = TensorShape.from_any(document.get("input_shape", ()))
    except GraphValidationError as e:
        diags.extend(e.diagnostics)
        input_shape = TensorShape(1, 1, 1, 1)
    if any(d < 1 for d in input_shape.astuple()):
        diags.append("input_shape dimensions must all be >= 1, got %r" % (input_shape.astuple(),))

    entries = document.get("layers")
    if not isinstance(entries, list) or not entries:
        raise GraphValidationError(diags + ["manifest has no layers"])
    seen_ids = set()
    for e in entries:
        lid = e.get("id")
        if not lid or not isinstance(lid, str):
            diags.append("layer entry %r has no usable id" % (e,))
        elif lid in seen_ids:
            diags.append("duplicate layer id %r" % lid)
        seen_ids.add(lid)
    order = _chain_order(entries, document.get("edges"), diags)
    by_id = {e.get("id"): e for e in entries}

    layers = []
    n, c, h, w = input_shape.astuple()
    for lid in order:
        e = by_id.get(lid, {})
        kind = e.get("kind")
        if kind not in LAYER_KINDS:
            diags.append("layer %r has unknown kind %r" % (lid, kind))
            continue

        def geom(field, lo=1):
            v = e.get(field)
            if not isinstance(v, int) or v < lo:
                diags.append("layer %r: %s must be an integer >= %d, got %r" % (lid, field, lo, v))
                return lo
            return v

        def take(pname, shape, maker):
            key = "%s.%s" % (lid, pname)
            if key in tensors:
                return _as_f32(key, tensors.pop(key), shape, diags)
            if rng is not None:
                return maker()
            diags.append("layer %r: no stored tensor %r and no init_seed" % (lid, key))
            return np.zeros(shape, np.float32)

        spec = None
        if kind == "conv2d":
            k, s, pad, c_out = geom("k"), geom("s"), geom("pad", 0), geom("c_out")
            made = {}

            def mk_conv():
                if "wb" not in made:
                    made["wb"] = _init_conv(rng, c, c_out, k)
                return made["wb"]

            wt = take("weight", (c_out, c, k, k), lambda: mk_conv()[0])
            bi = take("bias", (c_out,), lambda: mk_conv()[1])
            spec = ConvSpec(k, s, pad, c, c_out, wt, bi)
            ho, wo = conv_out_hw(h, w, k, s, pad)
            if ho < 1 or wo < 1:
                diags.append("layer %r: output %dx%d collapses below 1x1" % (lid, ho, wo))
                ho, wo = 1, 1
            c, h, w = c_out, ho, wo
        elif kind == "batchnorm":
            made = {}

            def mk_bn():
                if "p" not in made:
                    made["p"] = _init_bn(rng, c)
                return made["p"]

            g = take("gamma", (c,), lambda: mk_bn()[0])
            b = take("beta", (c,), lambda: mk_bn()[1])
            m = take("mean", (c,), lambda: mk_bn()[2])
            v = take("var", (c,), lambda: mk_bn()[3])
            if np.any(v < 0):
                diags.append("layer %r: variance entries must be >= 0" % lid)
            spec = BatchNormSpec(g, b, m, v, float(e.get("eps", 1e-5)))
        elif kind == "maxpool":
            k, s = geom("k"), geom("s")
            spec = PoolSpec(k, s)
            if k > h or k > w:
                diags.append("layer %r: pool window %d exceeds input %dx%d" % (lid, k, h, w))
            else:
                h, w = conv_out_hw(h, w, k, s, 0)
        elif kind == "globalavgpool":
            h, w = 1, 1
        elif kind == "dense":
            n_in = c * h * w
            n_out = geom("out_features")
            stated = e.get("in_features")
            if stated is not None and stated != n_in:
                diags.append("layer %r: in_features %r does not match incoming %d values" % (lid, stated, n_in))
            made = {}

            def mk_dense():
                if "wb" not in made:
                    made["wb"] = _init_dense(rng, n_in, n_out)
                return made["wb"]

            wt = take("weight", (n_out, n_in), lambda: mk_dense()[0])
            bi = take("bias", (n_out,), lambda: mk_dense()[1])
            spec = DenseSpec(n_in, n_out, wt, bi)
            c, h, w = n_out, 1, 1
        # relu / softmax keep shape and carry no parameters
        layers.append(Layer(lid, kind, spec))

    for key in tensors:
        diags.append("stored tensor %r does not belong to any layer" % key)
    if diags:
        raise GraphValidationError(diags)
    return ModelGraph(name, input_shape, layers, None if seed is None else int(seed))


def infer_shapes(graph):
    """Output TensorShape per layer id, walking the chain once."""
    shapes = {}
    n, c, h, w = graph.input_shape.astuple()
    for l in graph.layers:
        if l.kind == "conv2d":
            h, w = conv_out_hw(h, w, l.spec.k, l.spec.s, l.spec.pad)
            c = l.spec.c_out
        elif l.kind == "maxpool":
            h, w = conv_out_hw(h, w, l.spec.k, l.spec.s, 0)
        elif l.kind == "globalavgpool":
            h, w = 1, 1
        elif l.kind == "dense":
            c, h, w = l.spec.out_features, 1, 1
        shapes[l.id] = TensorShape(n, c, h, w)
    return shapes


def count_params(graph):
    """Stored parameter scalars, batchnorm counted as 4 values per channel."""
    total = 0
    for l in graph.layers:
        if l.kind == "conv2d":
            total += l.spec.weight.size + l.spec.bias.size
        elif l.kind == "dense":
            total += l.spec.weight.size + l.spec.bias.size
        elif l.kind == "batchnorm":
            total += 4 * l.spec.c
    return int(total)


@dataclasses.dataclass
class OpCounts:
    per_layer: list  # (layer_id, kind, category, ops)
    by_category: dict
    total: int


def count_ops(graph):
    """Per-frame op counts: one multiply-accumulate counts as 2 ops."""
    shapes = infer_shapes(graph)
    per_layer = []
    by_cat = {"conv": 0, "dense": 0, "eltwise": 0, "pool": 0}
    c, h, w = graph.input_shape.c, graph.input_shape.h, graph.input_shape.w
    for l in graph.layers:
        out = shapes[l.id]
        if l.kind == "conv2d":
            ops = 2 * l.spec.k * l.spec.k * l.spec.c_in * out.c * out.h * out.w
        elif l.kind == "dense":
            ops = 2 * l.spec.in_features * l.spec.out_features
        elif l.kind == "maxpool":
            ops = out.c * out.h * out.w * l.spec.k * l.spec.k
        elif l.kind == "globalavgpool":
            ops = c * h * w  # sums every input element
        else:  # batchnorm, relu, softmax: one op per element
            ops = out.c * out.h * out.w
        cat = OP_CATEGORY[l.kind]
        per_layer.append((l.id, l.kind, cat, int(ops)))
        by_cat[cat] += int(ops)
        c, h, w = out.c, out.h, out.w
    return OpCounts(per_layer, by_cat, sum(by_cat.values()))


def _layer_entry(l):
    e = {"id": l.id, "kind": l.kind}
    if l.kind == "conv2d":
        e.update(k=l.spec.k, s=l.spec.s, pad=l.spec.pad, c_out=l.spec.c_out)
    elif l.kind == "maxpool":
        e.update(k=l.spec.k, s=l.spec.s)
    elif l.kind == "dense":
        e.update(in_features=l.spec.in_features, out_features=l.spec.out_features)
    elif l.kind == "batchnorm":
        e.update(eps=l.spec.eps)
    return e


_PARAM_FIELDS = {
    "conv2d": (("weight", "weight"), ("bias", "bias")),
    "dense": (("weight", "weight"), ("bias", "bias")),
    "batchnorm": (("gamma", "gamma"), ("beta", "beta"), ("mean", "mean"), ("var", "var")),
}


def save_graph(graph, path):
    """Serialize with materialized parameters into the tensor container."""
    blob = container.BlobBuilder()
    for l in graph.layers:
        for pname, attr in _PARAM_FIELDS.get(l.kind, ()):
            blob.add("%s.%s" % (l.id, pname), getattr(l.spec, attr))
    manifest = {
        "format": "model",
        "format_version": container.FORMAT_VERSION,
        "name": graph.name,
        "input_shape": list(graph.input_shape.astuple()),
        "layers": [_layer_entry(l) for l in graph.layers],
        "params": count_params(graph),
        "tensors": blob.records,
    }
    if graph.init_seed is not None:
        manifest["init_seed"] = graph.init_seed
    return container.save_container(path, manifest, blob.tobytes())


def load_graph(path):
    """Load a model manifest; stored tensors win over init_seed."""
    manifest, blob = container.load_container(path, expected_format="model")
    tensors = container.attach_tensors(manifest, blob)
    graph = build_graph(manifest, tensors)
    stated = manifest.get("params")
    if stated is not None and int(stated) != count_params(graph):
        raise ContainerError(
            "manifest says %s parameters but the graph holds %d" % (stated, count_params(graph))
        )
    return graph
