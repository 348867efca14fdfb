"""Accelerator target description and the device resource model.

A target names one of the fixed-size accelerator builds (B512 through B4096,
the numeral is peak ops per cycle per core), a core count, clock, shared
memory bandwidth, and the op kinds its instruction set covers. Resource cost
scales linearly from a measured reference build (a dual-core B4096) at half
the reference per core, rescaled by peak ops and rounded up per resource.
"""

import dataclasses
import json
import math
import pathlib

from .errors import DpuflowError, ResourceBudgetError

ARCH_PEAK_OPS = {
    "B512": 512,
    "B800": 800,
    "B1024": 1024,
    "B1152": 1152,
    "B1600": 1600,
    "B2304": 2304,
    "B3136": 3136,
    "B4096": 4096,
}

MAX_CORES = 4

DEFAULT_SUPPORTED_OPS = ("conv2d", "relu", "maxpool", "globalavgpool", "dense")

# measured dual-core B4096 build on the default device
REFERENCE_DUAL_B4096_COST = {"dsp": 1420, "bram": 210, "ff": 198725, "lut": 105845}
REFERENCE_ARCH_PEAK = 4096

# default device budget (ZCU104-class part)
DEFAULT_DEVICE_BUDGET = {"dsp": 1728, "bram": 312, "ff": 460800, "lut": 230400}

RESOURCE_ORDER = ("dsp", "bram", "ff", "lut")


@dataclasses.dataclass
class TargetConfig:
    arch: str
    cores: int
    clock_mhz: float = 300.0
    bandwidth_mbps: float = 2041.91  # shared, in MB/s (1 MB = 1e6 bytes)
    power_w: float = 60.0
    buffer_bytes: int = 512 * 1024  # on-chip activation/weight buffer per core
    supported_ops: tuple = DEFAULT_SUPPORTED_OPS
    device_budget: dict = None
    reference_cost: dict = None
    isa_version: str = "dpu-isa-1"
    name: str = ""

    def __post_init__(self):
        if self.arch not in ARCH_PEAK_OPS:
            raise DpuflowError(
                "unknown arch %r (choose from %s)" % (self.arch, ", ".join(ARCH_PEAK_OPS))
            )
        if not 1 <= int(self.cores) <= MAX_CORES:
            raise DpuflowError("cores must be 1..%d, got %r" % (MAX_CORES, self.cores))
        if self.clock_mhz <= 0 or self.bandwidth_mbps <= 0 or self.power_w <= 0:
            raise DpuflowError("clock, bandwidth and power must all be positive")
        if self.buffer_bytes < 4096:
            raise DpuflowError("buffer_bytes is unrealistically small: %r" % self.buffer_bytes)
        self.cores = int(self.cores)
        self.supported_ops = tuple(self.supported_ops)
        if self.device_budget is None:
            self.device_budget = dict(DEFAULT_DEVICE_BUDGET)
        if self.reference_cost is None:
            self.reference_cost = dict(REFERENCE_DUAL_B4096_COST)
        for table in (self.device_budget, self.reference_cost):
            missing = [r for r in RESOURCE_ORDER if r not in table]
            if missing:
                raise DpuflowError("resource table missing entries: %s" % ", ".join(missing))
        if not self.name:
            self.name = "%s_x%d" % (self.arch.lower(), self.cores)

    @property
    def peak_ops_per_cycle(self):
        """Per core."""
        return ARCH_PEAK_OPS[self.arch]

    @property
    def clock_hz(self):
        return self.clock_mhz * 1e6

    @property
    def bytes_per_cycle(self):
        """Full-bandwidth bytes per clock cycle (MB/s over MHz cancels 1e6)."""
        return self.bandwidth_mbps / self.clock_mhz

    def identity(self):
        """Canonical fields that define compiled-model compatibility."""
        return {
            "arch": self.arch,
            "cores": self.cores,
            "clock_mhz": float(self.clock_mhz),
            "isa_version": self.isa_version,
        }

    def to_json(self):
        return {
            "format": "target",
            "format_version": 1,
            "name": self.name,
            "arch": self.arch,
            "cores": self.cores,
            "clock_mhz": self.clock_mhz,
            "bandwidth_mbps": self.bandwidth_mbps,
            "power_w": self.power_w,
            "buffer_bytes": self.buffer_bytes,
            "supported_ops": list(self.supported_ops),
            "device_budget": dict(self.device_budget),
            "reference_cost": dict(self.reference_cost),
            "isa_version": self.isa_version,
        }


def load_target(path):
    p = pathlib.Path(path)
    if not p.exists():
        raise DpuflowError("no such target file: %s" % p)
    doc = json.loads(p.read_text(encoding="utf-8"))
    if doc.get("format") not in (None, "target"):
        raise DpuflowError("%s is a %r file, not a target" % (p, doc.get("format")))
    kwargs = {}
    for field in (
        "arch", "cores", "clock_mhz", "bandwidth_mbps", "power_w", "buffer_bytes",
        "supported_ops", "device_budget", "reference_cost", "isa_version", "name",
    ):
        if field in doc:
            kwargs[field] = doc[field]
    try:
        return TargetConfig(**kwargs)
    except TypeError as e:
        raise DpuflowError("bad target file %s: %s" % (p, e)) from None


def save_target(target, path):
    p = pathlib.Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(target.to_json(), indent=2) + "\n", encoding="utf-8")
    return p


@dataclasses.dataclass
class ResourceRow:
    used: int
    total: int

    @property
    def pct(self):
        return 100.0 * self.used / self.total

    @property
    def ok(self):
        return self.used <= self.total


@dataclasses.dataclass
class ResourceReport:
    target_name: str
    rows: dict  # resource name -> ResourceRow

    @property
    def ok(self):
        return all(r.ok for r in self.rows.values())

    def exceeded(self):
        return [(name, row) for name, row in self.rows.items() if not row.ok]

    def format_table(self):
        lines = ["resource   used      total     util     fit"]
        for name in RESOURCE_ORDER:
            row = self.rows[name]
            lines.append(
                "%-8s %8d %10d   %6.2f%%   %s"
                % (name.upper(), row.used, row.total, row.pct, "ok" if row.ok else "EXCEEDED")
            )
        return "\n".join(lines)


def estimate_resources(target):
    """Linear per-core scaling from the reference build, rounded up.

    used(resource) = ceil(cores * (reference/2) * peak/4096). At B4096 x2
    this returns the reference numbers exactly.
    """
    scale = target.peak_ops_per_cycle / REFERENCE_ARCH_PEAK
    rows = {}
    for name in RESOURCE_ORDER:
        per_core = (target.reference_cost[name] / 2.0) * scale
        used = math.ceil(target.cores * per_core)
        rows[name] = ResourceRow(used=used, total=int(target.device_budget[name]))
    return ResourceReport(target.name, rows)


def check_resources(target):
    """estimate_resources, raising ResourceBudgetError when over budget."""
    report = estimate_resources(target)
    if not report.ok:
        raise ResourceBudgetError(report)
    return report
