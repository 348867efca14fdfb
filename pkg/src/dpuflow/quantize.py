"""Symmetric per-tensor INT8 quantization with power-of-two scales.

Every scale is 2**-f for an integer f, so requantization between layers is a
single arithmetic shift of the INT32 accumulator instead of a multiply.
Rounding is round-half-to-even everywhere: float to INT8, the requant shift,
and the average-pool division. relu and the pools run directly on INT8 codes,
which forces their output scale to equal their input scale; that choice is
what makes relu fusion into the preceding conv bit-exact.

bias values are stored as INT32 at scale 2**-(f_in + f_w), matching the
accumulator scale, so no rescale happens before the output shift.
"""

import dataclasses
import math

import numpy as np

from . import container, refexec
from .errors import AccumulatorOverflow, CalibrationError, GraphValidationError
from .graph import TensorShape, conv_out_hw

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


@dataclasses.dataclass(frozen=True)
class QuantParams:
    """Scale 2**-fraction_bits, signed 8-bit, zero point fixed at 0."""

    fraction_bits: int

    @property
    def scale(self):
        return 2.0 ** -self.fraction_bits


def params_for_max_abs(max_abs):
    """Largest f with max_abs * 2**f <= 127; all-zero tensors pin f = 7."""
    m = float(max_abs)
    if m < 0 or not math.isfinite(m):
        raise CalibrationError("max-abs statistic must be finite and >= 0, got %r" % max_abs)
    if m == 0.0:
        return QuantParams(7)
    f = int(math.floor(math.log2(127.0 / m)))
    while m * 2.0 ** (f + 1) <= 127.0:
        f += 1
    while m * 2.0**f > 127.0:
        f -= 1
    return QuantParams(f)


def quantize_tensor(x, qp):
    """fp32 -> (int8 codes, clipped element count). Round half to even."""
    scaled = np.rint(np.asarray(x, np.float64) * 2.0**qp.fraction_bits)
    clipped = int(np.count_nonzero((scaled < INT8_MIN) | (scaled > INT8_MAX)))
    return np.clip(scaled, INT8_MIN, INT8_MAX).astype(np.int8), clipped


def dequantize_tensor(q, qp):
    return (np.asarray(q, np.float64) * 2.0**-qp.fraction_bits).astype(np.float32)


# ---------------------------------------------------------------------------
# round-half-even integer primitives


def rhe_shift(acc, r):
    """Round-half-even arithmetic shift of an int64 array by r bits.

    r > 0 divides by 2**r with round half to even; r < 0 is an exact left
    shift; r = 0 passes through.
    """
    acc = np.asarray(acc, np.int64)
    if r == 0:
        return acc.copy()
    if r < 0:
        return acc << int(-r)
    q = acc >> r  # arithmetic shift == floor division
    rem = acc & ((np.int64(1) << r) - 1)
    half = np.int64(1) << (r - 1)
    round_up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + round_up.astype(np.int64)


def rhe_div(total, count):
    """Round-half-even division of int64 array by a positive int."""
    if count <= 0:
        raise GraphValidationError(["division count must be positive, got %d" % count])
    total = np.asarray(total, np.int64)
    q = np.floor_divide(total, count)
    rem = total - q * count
    twice = 2 * rem
    round_up = (twice > count) | ((twice == count) & ((q & 1) == 1))
    return q + round_up.astype(np.int64)


def _clamp_int8(acc):
    return np.clip(acc, INT8_MIN, INT8_MAX).astype(np.int8)


# ---------------------------------------------------------------------------
# calibration


@dataclasses.dataclass
class CalibrationResult:
    act_params: dict  # tensor id ("input" or layer id) -> QuantParams
    weight_params: dict  # conv/dense layer id -> QuantParams
    act_max_abs: dict
    weight_max_abs: dict
    images: int
    batch_size: int


def calibrate(graph, images, batch_size=1):
    """Max-abs calibration over a forward trace of every image.

    The statistic is a running max, so any batch_size gives identical
    parameters; the knob only controls how many images go through the
    executor at once.
    """
    images = np.asarray(images, np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[0] == 0:
        raise CalibrationError("calibration needs a non-empty (n, c, h, w) image array")
    if batch_size < 1:
        raise CalibrationError("batch_size must be >= 1, got %d" % batch_size)
    expect = graph.input_shape.astuple()[1:]
    if images.shape[1:] != expect:
        raise CalibrationError(
            "calibration images are %r per frame, model wants %r" % (images.shape[1:], expect)
        )

    act_max = {"input": 0.0}
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        act_max["input"] = max(act_max["input"], float(np.max(np.abs(chunk), initial=0.0)))
        _, trace = refexec.forward_trace(graph, chunk)
        for lid, out in trace.outputs.items():
            cur = float(np.max(np.abs(out), initial=0.0))
            if not math.isfinite(cur):
                raise CalibrationError("layer %r produced non-finite activations" % lid)
            act_max[lid] = max(act_max.get(lid, 0.0), cur)

    weight_max = {}
    for l in graph.layers:
        if l.kind in ("conv2d", "dense"):
            weight_max[l.id] = float(np.max(np.abs(l.spec.weight), initial=0.0))
    return CalibrationResult(
        act_params={k: params_for_max_abs(v) for k, v in act_max.items()},
        weight_params={k: params_for_max_abs(v) for k, v in weight_max.items()},
        act_max_abs=act_max,
        weight_max_abs=weight_max,
        images=int(images.shape[0]),
        batch_size=int(batch_size),
    )


# ---------------------------------------------------------------------------
# quantized model


@dataclasses.dataclass
class QLayer:
    """One quantized layer. Geometry fields are populated per kind."""

    id: str
    kind: str
    f_in: int
    f_out: int
    k: int = 0
    s: int = 0
    pad: int = 0
    c_in: int = 0
    c_out: int = 0
    in_features: int = 0
    out_features: int = 0
    f_w: int = 0
    shift: int = 0
    weight_q: np.ndarray = None  # int8
    bias_q: np.ndarray = None  # int32
    fused_relu: bool = False


@dataclasses.dataclass
class QuantizedModel:
    name: str
    input_shape: TensorShape
    input_params: QuantParams
    layers: list
    calibration_images: int
    calibration_batch: int
    deploy_batch: int = 1

    def layer(self, layer_id):
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise KeyError(layer_id)


def _quantize_bias(bias, f_acc, layer_id):
    scaled = np.rint(np.asarray(bias, np.float64) * 2.0**f_acc)
    if np.any(scaled > INT32_MAX) or np.any(scaled < INT32_MIN):
        raise CalibrationError(
            "layer %r: bias does not fit INT32 at accumulator scale 2**-%d" % (layer_id, f_acc)
        )
    return scaled.astype(np.int32)


def quantize_model(graph, cal):
    """Lower an fp32 chain to INT8 using calibrated statistics.

    batchnorm must already be folded away; relu, maxpool and globalavgpool
    become pass-through in scale (f_out = f_in) regardless of calibration,
    because they permute or compare existing codes rather than rescale them.
    """
    if any(l.kind == "batchnorm" for l in graph.layers):
        raise GraphValidationError(["fold batchnorm before quantizing (see compiler.fold_batchnorm)"])
    needed = ["input"] + [l.id for l in graph.layers if l.kind in ("conv2d", "dense", "softmax")]
    missing = [t for t in needed if t not in cal.act_params]
    missing += [l.id for l in graph.layers
                if l.kind in ("conv2d", "dense") and l.id not in cal.weight_params]
    if missing:
        raise CalibrationError("calibration does not cover tensors: %s" % ", ".join(missing))

    qlayers = []
    f_cur = cal.act_params["input"].fraction_bits
    for l in graph.layers:
        f_in = f_cur
        if l.kind in ("conv2d", "dense"):
            f_w = cal.weight_params[l.id].fraction_bits
            f_out = cal.act_params[l.id].fraction_bits
            wq, _ = quantize_tensor(l.spec.weight, QuantParams(f_w))
            bq = _quantize_bias(l.spec.bias, f_in + f_w, l.id)
            common = dict(
                f_in=f_in, f_out=f_out, f_w=f_w, shift=f_in + f_w - f_out, weight_q=wq, bias_q=bq
            )
            if l.kind == "conv2d":
                ql = QLayer(l.id, "conv2d", k=l.spec.k, s=l.spec.s, pad=l.spec.pad,
                            c_in=l.spec.c_in, c_out=l.spec.c_out, **common)
            else:
                ql = QLayer(l.id, "dense", in_features=l.spec.in_features,
                            out_features=l.spec.out_features, **common)
        elif l.kind in ("relu", "maxpool", "globalavgpool"):
            f_out = f_in  # operates on codes, scale passes through
            ql = QLayer(l.id, l.kind, f_in=f_in, f_out=f_out)
            if l.kind == "maxpool":
                ql.k, ql.s = l.spec.k, l.spec.s
        elif l.kind == "softmax":
            # runs off the accelerator: dequantize, softmax, requantize
            f_out = cal.act_params[l.id].fraction_bits
            ql = QLayer(l.id, "softmax", f_in=f_in, f_out=f_out)
        else:
            raise GraphValidationError(["cannot quantize layer kind %r" % l.kind])
        qlayers.append(ql)
        f_cur = f_out
    return QuantizedModel(
        name=graph.name,
        input_shape=graph.input_shape,
        input_params=cal.act_params["input"],
        layers=qlayers,
        calibration_images=cal.images,
        calibration_batch=cal.batch_size,
    )


# ---------------------------------------------------------------------------
# INT8 kernels (the simulator executes these same routines)


def _check_acc(acc, layer_id):
    if np.any(acc > INT32_MAX) or np.any(acc < INT32_MIN):
        raise AccumulatorOverflow("layer %r: INT32 accumulator overflow" % layer_id)


def conv2d_int8(xq, ql):
    """int8 conv: int64 math checked against INT32 bounds, then rhe shift."""
    n, ci, h, w = xq.shape
    if ci != ql.c_in:
        raise GraphValidationError(["conv expects %d input channels, got %d" % (ql.c_in, ci)])
    ho, wo = conv_out_hw(h, w, ql.k, ql.s, ql.pad)
    xp = np.pad(xq, ((0, 0), (0, 0), (ql.pad, ql.pad), (ql.pad, ql.pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (ql.k, ql.k), axis=(2, 3))
    win = win[:, :, :: ql.s, :: ql.s][:, :, :ho, :wo]  # (n, ci, ho, wo, k, k)
    acc = np.tensordot(win.astype(np.int64), ql.weight_q.astype(np.int64), axes=([1, 4, 5], [1, 2, 3]))
    acc = acc.transpose(0, 3, 1, 2) + ql.bias_q.astype(np.int64)[None, :, None, None]
    _check_acc(acc, ql.id)
    out = _clamp_int8(rhe_shift(acc, ql.shift))
    if ql.fused_relu:
        out = np.maximum(out, np.int8(0))
    return out


def dense_int8(xq, ql):
    flat = xq.reshape(xq.shape[0], -1)
    if flat.shape[1] != ql.in_features:
        raise GraphValidationError(["dense expects %d inputs, got %d" % (ql.in_features, flat.shape[1])])
    acc = flat.astype(np.int64) @ ql.weight_q.astype(np.int64).T + ql.bias_q.astype(np.int64)[None, :]
    _check_acc(acc, ql.id)
    out = _clamp_int8(rhe_shift(acc, ql.shift))
    if ql.fused_relu:
        out = np.maximum(out, np.int8(0))
    return out.reshape(xq.shape[0], ql.out_features, 1, 1)


def relu_int8(xq):
    return np.maximum(xq, np.int8(0))


def maxpool_int8(xq, ql):
    n, c, h, w = xq.shape
    if ql.k > h or ql.k > w:
        raise GraphValidationError(["pool window %d exceeds input %dx%d" % (ql.k, h, w)])
    ho, wo = conv_out_hw(h, w, ql.k, ql.s, 0)
    win = np.lib.stride_tricks.sliding_window_view(xq, (ql.k, ql.k), axis=(2, 3))
    win = win[:, :, :: ql.s, :: ql.s][:, :, :ho, :wo]
    return win.max(axis=(4, 5))


def globalavgpool_int8(xq, ql):
    n, c, h, w = xq.shape
    total = xq.astype(np.int64).sum(axis=(2, 3))
    _check_acc(total, ql.id)
    return _clamp_int8(rhe_div(total, h * w)).reshape(n, c, 1, 1)


def softmax_int8(xq, ql):
    x = dequantize_tensor(xq, QuantParams(ql.f_in))
    probs = refexec.softmax_fp32(x)
    out, _ = quantize_tensor(probs, QuantParams(ql.f_out))
    return out


def apply_qlayer(ql, xq):
    if ql.kind == "conv2d":
        return conv2d_int8(xq, ql)
    if ql.kind == "dense":
        return dense_int8(xq, ql)
    if ql.kind == "relu":
        return relu_int8(xq)
    if ql.kind == "maxpool":
        return maxpool_int8(xq, ql)
    if ql.kind == "globalavgpool":
        return globalavgpool_int8(xq, ql)
    if ql.kind == "softmax":
        return softmax_int8(xq, ql)
    raise GraphValidationError(["cannot execute quantized layer kind %r" % ql.kind])


@dataclasses.dataclass
class QForwardResult:
    class_index: int
    logits: np.ndarray  # final int8 tensor
    activations: dict  # layer id -> int8 ndarray


def qforward(qmodel, image):
    """Run one fp32 image through the INT8 chain. Deploy batch is 1."""
    x = np.asarray(image, np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise GraphValidationError(["qforward takes a single image, got batch of %d" % x.shape[0]])
    xq, _ = quantize_tensor(x, qmodel.input_params)
    activations = {}
    for ql in qmodel.layers:
        xq = apply_qlayer(ql, xq)
        activations[ql.id] = xq
    flat = xq.reshape(-1)
    return QForwardResult(int(np.argmax(flat)), xq, activations)


def accuracy_fp32(graph, images, labels):
    hits = sum(refexec.predict(graph, img) == int(lab) for img, lab in zip(images, labels))
    return hits / len(labels)


def accuracy_int8(qmodel, images, labels):
    hits = sum(qforward(qmodel, img).class_index == int(lab) for img, lab in zip(images, labels))
    return hits / len(labels)


def agreement_rate(graph, qmodel, images):
    """Fraction of images where fp32 and INT8 pick the same class."""
    same = sum(refexec.predict(graph, img) == qforward(qmodel, img).class_index for img in images)
    return same / len(images)


# ---------------------------------------------------------------------------
# serialization

_GEOM_FIELDS = ("k", "s", "pad", "c_in", "c_out", "in_features", "out_features")


def save_qmodel(qmodel, path):
    blob = container.BlobBuilder()
    entries = []
    for ql in qmodel.layers:
        e = {"id": ql.id, "kind": ql.kind, "f_in": ql.f_in, "f_out": ql.f_out}
        for field in _GEOM_FIELDS:
            v = getattr(ql, field)
            if v:
                e[field] = v
        if ql.kind in ("conv2d", "dense"):
            e.update(f_w=ql.f_w, shift=ql.shift, fused_relu=ql.fused_relu)
            blob.add("%s.weight_q" % ql.id, ql.weight_q)
            blob.add("%s.bias_q" % ql.id, ql.bias_q)
        entries.append(e)
    manifest = {
        "format": "qmodel",
        "format_version": container.FORMAT_VERSION,
        "name": qmodel.name,
        "input_shape": list(qmodel.input_shape.astuple()),
        "input_fraction_bits": qmodel.input_params.fraction_bits,
        "calibration": {
            "images": qmodel.calibration_images,
            "batch_size": qmodel.calibration_batch,
        },
        "deploy_batch": qmodel.deploy_batch,
        "layers": entries,
        "tensors": blob.records,
    }
    return container.save_container(path, manifest, blob.tobytes())


def load_qmodel(path):
    manifest, blob = container.load_container(path, expected_format="qmodel")
    tensors = container.attach_tensors(manifest, blob)
    layers = []
    for e in manifest["layers"]:
        ql = QLayer(e["id"], e["kind"], f_in=int(e["f_in"]), f_out=int(e["f_out"]))
        for field in _GEOM_FIELDS:
            if field in e:
                setattr(ql, field, int(e[field]))
        if ql.kind in ("conv2d", "dense"):
            ql.f_w = int(e["f_w"])
            ql.shift = int(e["shift"])
            ql.fused_relu = bool(e.get("fused_relu", False))
            ql.weight_q = tensors["%s.weight_q" % ql.id].astype(np.int8)
            ql.bias_q = tensors["%s.bias_q" % ql.id].astype(np.int32)
        layers.append(ql)
    cal = manifest.get("calibration", {})
    return QuantizedModel(
        name=manifest.get("name", "model"),
        input_shape=TensorShape.from_any(manifest["input_shape"]),
        input_params=QuantParams(int(manifest["input_fraction_bits"])),
        layers=layers,
        calibration_images=int(cal.get("images", 0)),
        calibration_batch=int(cal.get("batch_size", 1)),
        deploy_batch=int(manifest.get("deploy_batch", 1)),
    )
