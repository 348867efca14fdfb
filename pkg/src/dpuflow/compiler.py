"""Compiler from quantized chains to a deployable instruction stream.

Passes, in order: absorb relu into the preceding conv/dense (bit-exact because
relu passes scale through), split a trailing softmax off to the host, partition
what remains by the target's supported op set, and refuse to deploy unless
exactly one accelerator subgraph comes out. Each layer is then tiled
output-stationary so one tile's input slab (halo included), weight slice and
output slab fit the per-core buffer, and emitted as LOAD/compute/SAVE
instructions with byte-accurate transfer sizes.

The compiled artifact embeds a fingerprint of the target it was built for;
running it on a different target is refused up front.
"""

import dataclasses
import math

import numpy as np

from . import container
from .errors import DpuflowError, GraphValidationError, SubgraphGateError
from .graph import ConvSpec, Layer, ModelGraph, TensorShape, conv_out_hw
from .quantize import QLayer, QuantParams, QuantizedModel

# ---------------------------------------------------------------------------
# batchnorm folding (fp32 pass, runs before calibration)


def fold_batchnorm(graph):
    """Fold every batchnorm into the conv2d directly before it.

    W' = W * g / sqrt(var + eps) per output channel, b' = (b - mean) * that
    scale + beta. Math runs in float64 and lands back in fp32. Idempotent:
    a graph without batchnorm comes back unchanged.
    """
    layers = []
    for l in graph.layers:
        if l.kind != "batchnorm":
            layers.append(Layer(l.id, l.kind, l.spec))
            continue
        if not layers or layers[-1].kind != "conv2d":
            raise GraphValidationError(
                ["batchnorm %r does not directly follow a conv2d, cannot fold" % l.id]
            )
        conv = layers[-1]
        bn = l.spec
        if bn.c != conv.spec.c_out:
            raise GraphValidationError(
                ["batchnorm %r has %d channels, conv %r makes %d" % (l.id, bn.c, conv.id, conv.spec.c_out)]
            )
        scale = bn.gamma.astype(np.float64) / np.sqrt(bn.var.astype(np.float64) + bn.eps)
        w = conv.spec.weight.astype(np.float64) * scale[:, None, None, None]
        b = (conv.spec.bias.astype(np.float64) - bn.mean.astype(np.float64)) * scale + bn.beta.astype(np.float64)
        layers[-1] = Layer(
            conv.id,
            "conv2d",
            ConvSpec(conv.spec.k, conv.spec.s, conv.spec.pad, conv.spec.c_in, conv.spec.c_out,
                     w.astype(np.float32), b.astype(np.float32)),
        )
    return ModelGraph(graph.name, graph.input_shape, layers, graph.init_seed)


# ---------------------------------------------------------------------------
# relu fusion (INT8 pass)


def fuse_relu(qmodel):
    """Absorb each relu that directly consumes a conv2d or dense layer.

    relu keeps the scale of its input, so clamping the already-requantized
    codes inside the producer is bit-identical to running relu standalone.
    Idempotent by construction.
    """
    out = []
    for ql in qmodel.layers:
        if ql.kind == "relu" and out and out[-1].kind in ("conv2d", "dense"):
            if ql.f_in != out[-1].f_out:
                raise GraphValidationError(
                    ["relu %r scale differs from its producer, refusing to fuse" % ql.id]
                )
            out[-1] = dataclasses.replace(out[-1], fused_relu=True)
        else:
            out.append(dataclasses.replace(ql))
    return QuantizedModel(
        name=qmodel.name,
        input_shape=qmodel.input_shape,
        input_params=qmodel.input_params,
        layers=out,
        calibration_images=qmodel.calibration_images,
        calibration_batch=qmodel.calibration_batch,
        deploy_batch=qmodel.deploy_batch,
    )


# ---------------------------------------------------------------------------
# partitioning


def partition(qlayers, supported_ops):
    """Split a chain into maximal runs of supported layers.

    Returns (segments, offenders) where offenders lists (id, kind) for every
    layer the target cannot execute.
    """
    segments, current, offenders = [], [], []
    for ql in qlayers:
        if ql.kind in supported_ops:
            current.append(ql)
        else:
            offenders.append((ql.id, ql.kind))
            if current:
                segments.append(current)
                current = []
    if current:
        segments.append(current)
    return segments, offenders


# ---------------------------------------------------------------------------
# target fingerprint

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data):
    """FNV-1a over bytes, 64-bit."""
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclasses.dataclass(frozen=True)
class Fingerprint:
    arch: str
    cores: int
    clock_mhz: float
    isa_version: str
    digest: int

    @property
    def hex(self):
        return "%016x" % self.digest


def compute_fingerprint(target):
    ident = target.identity()
    text = ";".join("%s=%s" % (k, _canon_value(ident[k])) for k in sorted(ident))
    return Fingerprint(
        arch=ident["arch"],
        cores=ident["cores"],
        clock_mhz=ident["clock_mhz"],
        isa_version=ident["isa_version"],
        digest=fnv1a64(text.encode("utf-8")),
    )


def _canon_value(v):
    if isinstance(v, float):
        return "%g" % v
    return str(v)


@dataclasses.dataclass
class FingerprintCheck:
    ok: bool
    compiled_digest: int
    target_digest: int


def verify_fingerprint(compiled, target):
    """Compare a compiled model's embedded fingerprint against a target."""
    want = compute_fingerprint(target)
    have = compiled.fingerprint
    return FingerprintCheck(have.digest == want.digest, have.digest, want.digest)


# ---------------------------------------------------------------------------
# tiling and instruction emission

LOAD, SAVE = "LOAD", "SAVE"
COMPUTE_OPCODE = {
    "conv2d": "CONV",
    "dense": "DENSE",
    "maxpool": "MAXPOOL",
    "globalavgpool": "AVGPOOL",
    "relu": "ELTW",
}


@dataclasses.dataclass
class Instruction:
    opcode: str
    layer_id: str
    tile: int
    tensor: str = ""  # operand name for LOAD/SAVE ("act:<id>", "wt:<id>", "bias:<id>")
    offset: int = 0  # byte offset of the tile's first element in that tensor
    nbytes: int = 0
    in_shape: tuple = None  # (c, h, w) of the compute tile
    out_shape: tuple = None
    ops: int = 0
    shift: int = 0
    fused_relu: bool = False

    def render(self):
        if self.opcode in (LOAD, SAVE):
            return "%-7s %-10s t%-3d %-14s off=%-8d bytes=%d" % (
                self.opcode, self.layer_id, self.tile, self.tensor, self.offset, self.nbytes)
        return "%-7s %-10s t%-3d in=%-12s out=%-12s ops=%-10d shift=%-3d relu=%d" % (
            self.opcode, self.layer_id, self.tile,
            "x".join(map(str, self.in_shape)), "x".join(map(str, self.out_shape)),
            self.ops, self.shift, int(self.fused_relu))


def qlayer_ops(ql, in_shape, out_shape):
    """Per-frame op count for a quantized layer (1 MAC = 2 ops).

    A fused relu is free: the clamp happens inside the producer's requant
    stage, no separate instruction runs.
    """
    ci, hi, wi = in_shape
    co, ho, wo = out_shape
    if ql.kind == "conv2d":
        return 2 * ql.k * ql.k * ql.c_in * co * ho * wo
    if ql.kind == "dense":
        return 2 * ql.in_features * ql.out_features
    if ql.kind == "maxpool":
        return co * ho * wo * ql.k * ql.k
    if ql.kind == "globalavgpool":
        return ci * hi * wi
    return co * ho * wo  # relu, softmax


def qlayer_out_shape(ql, in_shape):
    c, h, w = in_shape
    if ql.kind == "conv2d":
        ho, wo = conv_out_hw(h, w, ql.k, ql.s, ql.pad)
        if ho < 1 or wo < 1:
            raise GraphValidationError(["layer %r output collapses below 1x1" % ql.id])
        return (ql.c_out, ho, wo)
    if ql.kind == "dense":
        if c * h * w != ql.in_features:
            raise GraphValidationError(
                ["dense %r wants %d inputs, chain provides %d" % (ql.id, ql.in_features, c * h * w)]
            )
        return (ql.out_features, 1, 1)
    if ql.kind == "maxpool":
        if ql.k > h or ql.k > w:
            raise GraphValidationError(["pool %r window exceeds its input" % ql.id])
        ho, wo = conv_out_hw(h, w, ql.k, ql.s, 0)
        return (c, ho, wo)
    if ql.kind == "globalavgpool":
        return (c, 1, 1)
    return in_shape


def _in_row_span(r0, r1, k, s, pad, h_in):
    """Input rows needed for output rows [r0, r1), halo included."""
    lo = max(0, r0 * s - pad)
    hi = min(h_in - 1, (r1 - 1) * s - pad + k - 1)
    return lo, hi - lo + 1


def _row_splits(total, chunk):
    return [(r, min(r + chunk, total)) for r in range(0, total, chunk)]


def _tile_conv(ql, in_shape, out_shape, producer, buffer_bytes):
    ci, hi, wi = in_shape
    co, ho, wo = out_shape
    w_elems = ql.k * ql.k * ql.c_in

    def max_footprint(rows, cos):
        worst_in = 0
        for r0, r1 in _row_splits(ho, rows):
            _, n = _in_row_span(r0, r1, ql.k, ql.s, ql.pad, hi)
            worst_in = max(worst_in, n)
        return ci * worst_in * wi + cos * w_elems + 4 * cos + cos * rows * wo

    rows, cos = ho, co
    while max_footprint(rows, cos) > buffer_bytes:
        # shrink whichever side dominates the footprint, rows first
        if rows > 1:
            rows = math.ceil(rows / 2)
        elif cos > 1:
            cos = math.ceil(cos / 2)
        else:
            raise DpuflowError(
                "layer %r: minimal tile (%d bytes) exceeds the %d-byte buffer"
                % (ql.id, max_footprint(1, 1), buffer_bytes)
            )

    instrs, t = [], 0
    for c0 in range(0, co, cos):
        c1 = min(c0 + cos, co)
        for r0, r1 in _row_splits(ho, rows):
            in_lo, in_rows = _in_row_span(r0, r1, ql.k, ql.s, ql.pad, hi)
            t_ops = 2 * ql.k * ql.k * ql.c_in * (c1 - c0) * (r1 - r0) * wo
            instrs += [
                Instruction(LOAD, ql.id, t, "act:%s" % producer, in_lo * wi, ci * in_rows * wi),
                Instruction(LOAD, ql.id, t, "wt:%s" % ql.id, c0 * w_elems, (c1 - c0) * w_elems),
                Instruction(LOAD, ql.id, t, "bias:%s" % ql.id, 4 * c0, 4 * (c1 - c0)),
                Instruction(COMPUTE_OPCODE["conv2d"], ql.id, t,
                            in_shape=(ci, in_rows, wi), out_shape=(c1 - c0, r1 - r0, wo),
                            ops=t_ops, shift=ql.shift, fused_relu=ql.fused_relu),
                Instruction(SAVE, ql.id, t, "act:%s" % ql.id, c0 * ho * wo + r0 * wo,
                            (c1 - c0) * (r1 - r0) * wo),
            ]
            t += 1
    return instrs


def _tile_dense(ql, in_shape, producer, buffer_bytes):
    n_in, n_out = ql.in_features, ql.out_features

    def footprint(cos):
        return n_in + cos * n_in + 4 * cos + cos

    cos = n_out
    while footprint(cos) > buffer_bytes:
        if cos == 1:
            raise DpuflowError(
                "layer %r: minimal tile (%d bytes) exceeds the %d-byte buffer"
                % (ql.id, footprint(1), buffer_bytes)
            )
        cos = math.ceil(cos / 2)

    instrs = []
    for t, c0 in enumerate(range(0, n_out, cos)):
        c1 = min(c0 + cos, n_out)
        instrs += [
            Instruction(LOAD, ql.id, t, "act:%s" % producer, 0, n_in),
            Instruction(LOAD, ql.id, t, "wt:%s" % ql.id, c0 * n_in, (c1 - c0) * n_in),
            Instruction(LOAD, ql.id, t, "bias:%s" % ql.id, 4 * c0, 4 * (c1 - c0)),
            Instruction(COMPUTE_OPCODE["dense"], ql.id, t,
                        in_shape=(n_in, 1, 1), out_shape=(c1 - c0, 1, 1),
                        ops=2 * n_in * (c1 - c0), shift=ql.shift, fused_relu=ql.fused_relu),
            Instruction(SAVE, ql.id, t, "act:%s" % ql.id, c0, c1 - c0),
        ]
    return instrs


def _tile_rowwise(ql, in_shape, out_shape, producer, buffer_bytes):
    """maxpool, standalone relu and globalavgpool: no weights, row tiles."""
    ci, hi, wi = in_shape
    co, ho, wo = out_shape
    k = ql.k if ql.kind == "maxpool" else 1
    s = ql.s if ql.kind == "maxpool" else 1
    whole_input = ql.kind == "globalavgpool"  # needs every row at once

    def max_footprint(rows):
        if whole_input:
            return ci * hi * wi + co
        worst_in = 0
        for r0, r1 in _row_splits(ho, rows):
            _, n = _in_row_span(r0, r1, k, s, 0, hi)
            worst_in = max(worst_in, n)
        return ci * worst_in * wi + co * rows * wo

    rows = 1 if whole_input else ho
    while max_footprint(rows) > buffer_bytes:
        if rows == 1:
            raise DpuflowError(
                "layer %r: minimal tile (%d bytes) exceeds the %d-byte buffer"
                % (ql.id, max_footprint(1), buffer_bytes)
            )
        rows = math.ceil(rows / 2)

    instrs = []
    for t, (r0, r1) in enumerate(_row_splits(ho, rows)):
        if whole_input:
            in_lo, in_rows = 0, hi
        else:
            in_lo, in_rows = _in_row_span(r0, r1, k, s, 0, hi)
        tile_in = (ci, in_rows, wi)
        tile_out = (co, r1 - r0, wo)
        if ql.kind == "maxpool":
            t_ops = co * (r1 - r0) * wo * k * k
        elif ql.kind == "globalavgpool":
            t_ops = ci * hi * wi
        else:
            t_ops = co * (r1 - r0) * wo
        instrs += [
            Instruction(LOAD, ql.id, t, "act:%s" % producer, in_lo * wi, ci * in_rows * wi),
            Instruction(COMPUTE_OPCODE[ql.kind], ql.id, t,
                        in_shape=tile_in, out_shape=tile_out, ops=t_ops, shift=0),
            Instruction(SAVE, ql.id, t, "act:%s" % ql.id, r0 * wo, co * (r1 - r0) * wo),
        ]
    return instrs


# ---------------------------------------------------------------------------
# compiled model


@dataclasses.dataclass
class CompiledLayer:
    q: QLayer
    in_shape: tuple  # (c, h, w)
    out_shape: tuple
    ops: int
    bytes_in: int
    bytes_out: int
    tiles: int
    instructions: list

    @property
    def bytes_moved(self):
        return self.bytes_in + self.bytes_out


@dataclasses.dataclass
class CompiledModel:
    name: str
    input_shape: TensorShape
    input_params: QuantParams
    layers: list  # CompiledLayer, the single accelerator subgraph
    host_tail: list  # QLayer, runs off-accelerator after the subgraph
    fingerprint: Fingerprint
    target_name: str
    supported_ops: tuple
    totals: dict

    def instruction_count(self):
        return sum(len(cl.instructions) for cl in self.layers)

    def render_instructions(self):
        lines = []
        for cl in self.layers:
            for ins in cl.instructions:
                lines.append(ins.render())
        return "\n".join(lines) + "\n"


def compile_model(qmodel, target):
    """Lower a quantized model onto a target. Raises SubgraphGateError when
    the chain does not reduce to exactly one accelerator subgraph."""
    if any(ql.kind == "batchnorm" for ql in qmodel.layers):
        raise GraphValidationError(["quantized model still contains batchnorm"])
    fused = fuse_relu(qmodel)

    layers = list(fused.layers)
    host_tail = []
    while layers and layers[-1].kind == "softmax":
        host_tail.insert(0, layers.pop())

    segments, offenders = partition(layers, target.supported_ops)
    if offenders or len(segments) != 1:
        raise SubgraphGateError(len(segments), offenders)

    compiled = []
    shape = qmodel.input_shape.astuple()[1:]
    producer = "input"
    for ql in segments[0]:
        out_shape = qlayer_out_shape(ql, shape)
        if ql.kind == "conv2d":
            instrs = _tile_conv(ql, shape, out_shape, producer, target.buffer_bytes)
        elif ql.kind == "dense":
            instrs = _tile_dense(ql, shape, producer, target.buffer_bytes)
        else:
            instrs = _tile_rowwise(ql, shape, out_shape, producer, target.buffer_bytes)
        bytes_in = sum(i.nbytes for i in instrs if i.opcode == LOAD)
        bytes_out = sum(i.nbytes for i in instrs if i.opcode == SAVE)
        tiles = 1 + max(i.tile for i in instrs)
        compiled.append(CompiledLayer(ql, shape, out_shape, qlayer_ops(ql, shape, out_shape),
                                      bytes_in, bytes_out, tiles, instrs))
        shape = out_shape
        producer = ql.id

    by_cat = {"conv": 0, "dense": 0, "eltwise": 0, "pool": 0}
    for cl in compiled:
        cat = {"conv2d": "conv", "dense": "dense", "maxpool": "pool",
               "globalavgpool": "pool", "relu": "eltwise"}[cl.q.kind]
        by_cat[cat] += cl.ops
    totals = {
        "ops_by_category": by_cat,
        "ops": sum(by_cat.values()),
        "bytes_moved": sum(cl.bytes_moved for cl in compiled),
        "input_bytes": qmodel.input_shape.numel(),
    }
    return CompiledModel(
        name=qmodel.name,
        input_shape=qmodel.input_shape,
        input_params=qmodel.input_params,
        layers=compiled,
        host_tail=[dataclasses.replace(ql) for ql in host_tail],
        fingerprint=compute_fingerprint(target),
        target_name=target.name,
        supported_ops=tuple(target.supported_ops),
        totals=totals,
    )


# ---------------------------------------------------------------------------
# serialization

_Q_INT_FIELDS = ("f_in", "f_out", "k", "s", "pad", "c_in", "c_out",
                 "in_features", "out_features", "f_w", "shift")


def _qlayer_entry(ql):
    e = {"id": ql.id, "kind": ql.kind, "fused_relu": bool(ql.fused_relu)}
    for f in _Q_INT_FIELDS:
        e[f] = int(getattr(ql, f))
    return e


def _qlayer_from_entry(e, tensors):
    ql = QLayer(e["id"], e["kind"], f_in=0, f_out=0)
    for f in _Q_INT_FIELDS:
        setattr(ql, f, int(e.get(f, 0)))
    ql.fused_relu = bool(e.get("fused_relu", False))
    if ql.kind in ("conv2d", "dense"):
        ql.weight_q = tensors["%s.weight_q" % ql.id].astype(np.int8)
        ql.bias_q = tensors["%s.bias_q" % ql.id].astype(np.int32)
    return ql


def _instr_entry(ins):
    e = {"op": ins.opcode, "layer": ins.layer_id, "tile": ins.tile}
    if ins.opcode in (LOAD, SAVE):
        e.update(tensor=ins.tensor, offset=ins.offset, nbytes=ins.nbytes)
    else:
        e.update(in_shape=list(ins.in_shape), out_shape=list(ins.out_shape),
                 ops=ins.ops, shift=ins.shift, fused_relu=bool(ins.fused_relu))
    return e


def _instr_from_entry(e):
    if e["op"] in (LOAD, SAVE):
        return Instruction(e["op"], e["layer"], int(e["tile"]),
                           tensor=e["tensor"], offset=int(e["offset"]), nbytes=int(e["nbytes"]))
    return Instruction(e["op"], e["layer"], int(e["tile"]),
                       in_shape=tuple(e["in_shape"]), out_shape=tuple(e["out_shape"]),
                       ops=int(e["ops"]), shift=int(e["shift"]),
                       fused_relu=bool(e.get("fused_relu", False)))


def save_cmodel(cm, path):
    """Write <stem>.json/.bin plus a human-readable <stem>.inst.txt listing."""
    blob = container.BlobBuilder()
    layer_entries = []
    for cl in cm.layers:
        if cl.q.kind in ("conv2d", "dense"):
            blob.add("%s.weight_q" % cl.q.id, cl.q.weight_q)
            blob.add("%s.bias_q" % cl.q.id, cl.q.bias_q)
        layer_entries.append({
            "q": _qlayer_entry(cl.q),
            "in_shape": list(cl.in_shape),
            "out_shape": list(cl.out_shape),
            "ops": cl.ops,
            "bytes_in": cl.bytes_in,
            "bytes_out": cl.bytes_out,
            "tiles": cl.tiles,
            "instructions": [_instr_entry(i) for i in cl.instructions],
        })
    fp = cm.fingerprint
    manifest = {
        "format": "cmodel",
        "format_version": container.FORMAT_VERSION,
        "name": cm.name,
        "input_shape": list(cm.input_shape.astuple()),
        "input_fraction_bits": cm.input_params.fraction_bits,
        "target": {
            "name": cm.target_name,
            "arch": fp.arch,
            "cores": fp.cores,
            "clock_mhz": fp.clock_mhz,
            "isa_version": fp.isa_version,
            "fingerprint": fp.hex,
        },
        "supported_ops": list(cm.supported_ops),
        "totals": cm.totals,
        "layers": layer_entries,
        "host_tail": [_qlayer_entry(ql) for ql in cm.host_tail],
        "tensors": blob.records,
    }
    out = container.save_container(path, manifest, blob.tobytes())
    out.with_suffix("").with_suffix(".inst.txt").write_text(cm.render_instructions(), encoding="utf-8")
    return out


def load_cmodel(path):
    manifest, blob = container.load_container(path, expected_format="cmodel")
    tensors = container.attach_tensors(manifest, blob)
    layers = []
    for e in manifest["layers"]:
        ql = _qlayer_from_entry(e["q"], tensors)
        layers.append(CompiledLayer(
            q=ql,
            in_shape=tuple(e["in_shape"]),
            out_shape=tuple(e["out_shape"]),
            ops=int(e["ops"]),
            bytes_in=int(e["bytes_in"]),
            bytes_out=int(e["bytes_out"]),
            tiles=int(e["tiles"]),
            instructions=[_instr_from_entry(i) for i in e["instructions"]],
        ))
    t = manifest["target"]
    fp = Fingerprint(t["arch"], int(t["cores"]), float(t["clock_mhz"]), t["isa_version"],
                     int(t["fingerprint"], 16))
    return CompiledModel(
        name=manifest.get("name", "model"),
        input_shape=TensorShape.from_any(manifest["input_shape"]),
        input_params=QuantParams(int(manifest["input_fraction_bits"])),
        layers=layers,
        host_tail=[_qlayer_from_entry(e, tensors) for e in manifest.get("host_tail", [])],
        fingerprint=fp,
        target_name=t.get("name", ""),
        supported_ops=tuple(manifest.get("supported_ops", ())),
        totals=manifest.get("totals", {}),
    )
