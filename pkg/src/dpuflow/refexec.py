"""FP32 reference executor with a pinned accumulation order.

Results are bit-stable across runs and platforms because every kernel
accumulates in one documented order instead of delegating to BLAS. Convolution
is cross-correlation (no kernel flip); for each output element the partial sums
are added input-channel first, then kernel row, then kernel column, starting
from 0.0, with the bias added once at the end. Dense layers accumulate over
input features in index order. This path is the semantic reference the
quantizer calibrates against; it is deliberately not optimized for speed.
"""

import dataclasses

import numpy as np

from .errors import GraphValidationError
from .graph import conv_out_hw


def conv2d_fp32(x, spec):
    """Cross-correlation over nchw input, fp32 everywhere.

    Accumulation order per output element: c_in outer, kernel row, kernel
    column; bias added last. Vectorized over batch and output positions only,
    which keeps the scalar order intact (IEEE fp32 add/mul are elementwise).
    """
    x = np.asarray(x, np.float32)
    n, ci, h, w = x.shape
    if ci != spec.c_in:
        raise GraphValidationError(["conv expects %d input channels, got %d" % (spec.c_in, ci)])
    ho, wo = conv_out_hw(h, w, spec.k, spec.s, spec.pad)
    if ho < 1 or wo < 1:
        raise GraphValidationError(["conv output collapses to %dx%d" % (ho, wo)])
    xp = np.pad(x, ((0, 0), (0, 0), (spec.pad, spec.pad), (spec.pad, spec.pad)))
    acc = np.zeros((n, spec.c_out, ho, wo), np.float32)
    for c in range(spec.c_in):
        for kh in range(spec.k):
            for kw in range(spec.k):
                patch = xp[:, c, kh : kh + spec.s * ho : spec.s, kw : kw + spec.s * wo : spec.s]
                acc += patch[:, None, :, :] * spec.weight[None, :, c, kh, kw, None, None]
    return acc + spec.bias[None, :, None, None]


def dense_fp32(x, spec):
    """Accumulates over input features in index order, bias last."""
    x = np.asarray(x, np.float32)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != spec.in_features:
        raise GraphValidationError(
            ["dense expects %d input values, got %d" % (spec.in_features, flat.shape[1])]
        )
    acc = np.zeros((flat.shape[0], spec.out_features), np.float32)
    for i in range(spec.in_features):
        acc += flat[:, i : i + 1] * spec.weight[None, :, i]
    out = acc + spec.bias[None, :]
    return out.reshape(x.shape[0], spec.out_features, 1, 1)


def batchnorm_fp32(x, spec):
    """Literal gamma * (x - mean) / sqrt(var + eps) + beta in fp32."""
    x = np.asarray(x, np.float32)
    g = spec.gamma[None, :, None, None]
    b = spec.beta[None, :, None, None]
    m = spec.mean[None, :, None, None]
    s = np.sqrt(spec.var.astype(np.float32) + np.float32(spec.eps))[None, :, None, None]
    return (x - m) * g / s + b


def relu_fp32(x):
    return np.maximum(np.asarray(x, np.float32), np.float32(0))


def maxpool_fp32(x, spec):
    x = np.asarray(x, np.float32)
    n, c, h, w = x.shape
    if spec.k > h or spec.k > w:
        raise GraphValidationError(["pool window %d exceeds input %dx%d" % (spec.k, h, w)])
    ho, wo = conv_out_hw(h, w, spec.k, spec.s, 0)
    out = np.full((n, c, ho, wo), -np.inf, np.float32)
    for kh in range(spec.k):
        for kw in range(spec.k):
            out = np.maximum(out, x[:, :, kh : kh + spec.s * ho : spec.s, kw : kw + spec.s * wo : spec.s])
    return out


def globalavgpool_fp32(x):
    x = np.asarray(x, np.float32)
    n, c, h, w = x.shape
    # ordered sum (row then column) so results match a scalar walk exactly
    acc = np.zeros((n, c), np.float32)
    for i in range(h):
        for j in range(w):
            acc += x[:, :, i, j]
    return (acc / np.float32(h * w)).reshape(n, c, 1, 1)


def softmax_fp32(x):
    """Channel softmax, max-subtracted for stability."""
    x = np.asarray(x, np.float32)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def apply_layer(layer, x):
    if layer.kind == "conv2d":
        return conv2d_fp32(x, layer.spec)
    if layer.kind == "batchnorm":
        return batchnorm_fp32(x, layer.spec)
    if layer.kind == "relu":
        return relu_fp32(x)
    if layer.kind == "maxpool":
        return maxpool_fp32(x, layer.spec)
    if layer.kind == "globalavgpool":
        return globalavgpool_fp32(x)
    if layer.kind == "dense":
        return dense_fp32(x, layer.spec)
    if layer.kind == "softmax":
        return softmax_fp32(x)
    raise GraphValidationError(["cannot execute layer kind %r" % layer.kind])


@dataclasses.dataclass
class ExecutionTrace:
    layer_ids: list
    outputs: dict  # layer id -> ndarray


def forward(graph, x):
    for layer in graph.layers:
        x = apply_layer(layer, x)
    return x


def forward_trace(graph, x):
    """Forward pass that keeps every intermediate activation."""
    outputs = {}
    for layer in graph.layers:
        x = apply_layer(layer, x)
        outputs[layer.id] = x
    return x, ExecutionTrace([l.id for l in graph.layers], outputs)


def predict(graph, image):
    """Class index for one nchw image; ties break to the lowest index."""
    x = np.asarray(image, np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise GraphValidationError(["predict takes a single image, got batch of %d" % x.shape[0]])
    y = forward(graph, x)
    if y.shape[2] != 1 or y.shape[3] != 1:
        raise GraphValidationError(["graph output %r is not a class vector" % (y.shape,)])
    return int(np.argmax(y.reshape(-1)))
