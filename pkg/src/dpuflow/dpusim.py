"""Cycle-approximate simulator for the multi-core accelerator.

Per-layer time on one core is a roofline: max of compute cycles
(ceil(ops / peak_ops_per_cycle)) and memory cycles (ceil(bytes moved /
bytes-per-cycle at the bandwidth share the frame's stream holds)). A frame's
layers run back to back on one core, no inter-layer pipelining; multiple
in-flight frames contend for bandwidth and, past one frame per core, for
compute time.

Contention model: with T concurrent streams the shared link gives each
stream bandwidth / T, derated by (1 + kappa * max(0, T - cores)) once
streams outnumber cores; compute time per frame dilates by T / cores in the
same regime (fair time slicing). kappa = 0 means arbitration is free.

Numerics reuse the INT8 kernels of the quantizer, so a simulated frame is
bit-identical to qforward on the same model by construction of the passes.
"""

import dataclasses
import math

import numpy as np

from . import quantize
from .compiler import verify_fingerprint
from .errors import DpuflowError, FingerprintMismatch, GraphValidationError
from .target import check_resources


@dataclasses.dataclass
class LayerTiming:
    layer_id: str
    kind: str
    ops: int
    bytes_moved: int
    compute_cycles: int
    memory_cycles: int

    @property
    def cycles(self):
        return max(self.compute_cycles, self.memory_cycles)

    @property
    def bound(self):
        return "compute" if self.compute_cycles >= self.memory_cycles else "memory"


@dataclasses.dataclass
class CycleTrace:
    rows: list  # LayerTiming, chain order
    clock_mhz: float

    @property
    def total_cycles(self):
        return sum(r.cycles for r in self.rows)

    @property
    def seconds(self):
        return self.total_cycles / (self.clock_mhz * 1e6)

    def to_csv(self):
        lines = ["layer,kind,ops,bytes,compute_cycles,memory_cycles,cycles,bound"]
        for r in self.rows:
            lines.append("%s,%s,%d,%d,%d,%d,%d,%s" % (
                r.layer_id, r.kind, r.ops, r.bytes_moved,
                r.compute_cycles, r.memory_cycles, r.cycles, r.bound))
        return "\n".join(lines) + "\n"


def layer_cycles(ops, bytes_moved, target, bandwidth_mbps=None):
    """(compute, memory) cycle counts for one layer on one core.

    bandwidth_mbps is the share this stream holds; defaults to the full link.
    """
    if bandwidth_mbps is None:
        bandwidth_mbps = target.bandwidth_mbps
    if bandwidth_mbps <= 0:
        raise DpuflowError("allocated bandwidth must be positive, got %r" % bandwidth_mbps)
    compute = math.ceil(ops / target.peak_ops_per_cycle)
    bytes_per_cycle = bandwidth_mbps / target.clock_mhz
    memory = math.ceil(bytes_moved / bytes_per_cycle)
    return compute, memory


def arbitrate_bandwidth(target, active_streams, kappa=0.0):
    """Per-stream MB/s when active_streams frames are in flight."""
    if active_streams < 1:
        raise DpuflowError("active_streams must be >= 1, got %r" % active_streams)
    if kappa < 0:
        raise DpuflowError("kappa must be >= 0, got %r" % kappa)
    overload = max(0, active_streams - target.cores)
    return target.bandwidth_mbps / active_streams / (1.0 + kappa * overload)


@dataclasses.dataclass
class LoadedModel:
    cmodel: object
    target: object


def load_model(cmodel, target):
    """Admission check: fingerprint must match, resources must fit."""
    check = verify_fingerprint(cmodel, target)
    if not check.ok:
        raise FingerprintMismatch(check.compiled_digest, check.target_digest)
    check_resources(target)
    return LoadedModel(cmodel, target)


@dataclasses.dataclass
class FrameProfile:
    """Measured per-frame costs that stand in for the compiled model's own.

    Used when timing should track an observed board rather than the analytic
    layer walk: core_seconds is single-stream busy time per frame on one
    core, bytes_per_frame the off-chip traffic per frame.
    """

    core_seconds: float
    bytes_per_frame: float
    ops_per_frame: float = 0.0

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(float(doc["core_seconds"]), float(doc["bytes_per_frame"]),
                   float(doc.get("ops_per_frame", 0.0)))


def _frame_parts(loaded, profile):
    """(ops, bytes) pairs per schedulable unit of one frame."""
    if profile is not None:
        clock = loaded.target.clock_hz
        # round at a millionth of a cycle so representation fuzz in
        # seconds-times-hertz cannot add a whole cycle before the ceil
        cc = math.ceil(round(profile.core_seconds * clock, 6))
        # one opaque unit: compute cycles fixed, bytes as given
        return [(cc * loaded.target.peak_ops_per_cycle, profile.bytes_per_frame)]
    return [(cl.ops, cl.bytes_moved) for cl in loaded.cmodel.layers]


def frame_cycles(loaded, threads=1, kappa=0.0, profile=None):
    """Cycles one frame occupies end to end with `threads` frames in flight."""
    if threads < 1:
        raise DpuflowError("threads must be >= 1, got %r" % threads)
    target = loaded.target
    share = arbitrate_bandwidth(target, threads, kappa)
    total = 0
    for ops, nbytes in _frame_parts(loaded, profile):
        compute, memory = layer_cycles(ops, nbytes, target, share)
        if threads > target.cores:
            # core time-slicing: T frames share `cores` execution slots
            compute = math.ceil(compute * threads / target.cores)
        total += max(compute, memory)
    return total


def simulate_frame(loaded, image):
    """Run one image through the compiled subgraph.

    Returns (final int8 tensor, CycleTrace). Timing is single-stream at full
    bandwidth; host-tail layers execute numerically but cost no accelerator
    cycles.
    """
    x = np.asarray(image, np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise GraphValidationError(["simulate_frame takes one image, got batch of %d" % x.shape[0]])
    target = loaded.target
    xq, _ = quantize.quantize_tensor(x, loaded.cmodel.input_params)
    rows = []
    for cl in loaded.cmodel.layers:
        xq = quantize.apply_qlayer(cl.q, xq)
        compute, memory = layer_cycles(cl.ops, cl.bytes_moved, target)
        rows.append(LayerTiming(cl.q.id, cl.q.kind, cl.ops, cl.bytes_moved, compute, memory))
    for ql in loaded.cmodel.host_tail:
        xq = quantize.apply_qlayer(ql, xq)
    return xq, CycleTrace(rows, target.clock_mhz)


def simulate_classify(loaded, image):
    """Class index + trace for one image (ties break to the lowest index)."""
    out, trace = simulate_frame(loaded, image)
    return int(np.argmax(out.reshape(-1))), trace
