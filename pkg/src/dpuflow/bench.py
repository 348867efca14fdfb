"""Benchmark harness: data loading, thread sweeps, fits and comparison tables.

Throughput numbers come from the simulator's cycle model, never wall clock:
frames are dealt round robin to T worker threads, every in-flight frame costs
frame_cycles(T) under bandwidth contention, and the makespan is the slowest
worker's total. Reports render as delimited text with stable formatting so
repeated runs diff clean.

A scenario file can pin a measured FrameProfile (per-frame core seconds and
bytes) in place of the compiled model's analytic costs; fit_scenario recovers
such a profile from observed (threads, fps) points: bytes per frame from the
saturated point at T = cores, then a least-squares fit of the remaining two
free parameters (core seconds, kappa).
"""

import dataclasses
import json
import math
import os
import pathlib

import numpy as np
from scipy.optimize import least_squares

from . import compiler, dpusim, target as target_mod
from .dpusim import FrameProfile, LoadedModel
from .errors import DpuflowError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_CLASSES = 10


def load_cifar10(path, limit=None):
    """Read a CIFAR-10 binary batch: (images fp32 in [0, 1], labels int64)."""
    p = pathlib.Path(path)
    if not p.exists():
        raise DpuflowError("no such image file: %s" % p)
    raw = np.frombuffer(p.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise DpuflowError(
            "%s is %d bytes, not a multiple of the %d-byte record" % (p, raw.size, CIFAR_RECORD)
        )
    recs = raw.reshape(-1, CIFAR_RECORD)
    if limit is not None:
        recs = recs[:limit]
    labels = recs[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DpuflowError(
            "record %d carries label %d, outside 0..%d" % (bad[0], labels[bad[0]], CIFAR_CLASSES - 1)
        )
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def write_synthetic_cifar(path, count, seed=0):
    """Write a valid CIFAR-10 binary batch of random images.

    No dataset ships with the package; this generates deterministic stand-in
    records (uniform pixels, uniform labels) in the real on-disk layout for
    calibration demos and tests.
    """
    if count < 1:
        raise DpuflowError("count must be >= 1, got %r" % count)
    rng = np.random.default_rng(seed)
    recs = np.empty((count, CIFAR_RECORD), np.uint8)
    recs[:, 0] = rng.integers(0, CIFAR_CLASSES, size=count)
    recs[:, 1:] = rng.integers(0, 256, size=(count, CIFAR_RECORD - 1))
    p = pathlib.Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(recs.tobytes())
    return p


# ---------------------------------------------------------------------------
# reports


@dataclasses.dataclass
class BenchRow:
    threads: int
    frame_cycles: int
    frames: int
    makespan_cycles: int
    seconds: float
    fps: float
    latency_ms: float
    fps_per_watt: float
    gops: float
    bw_mbps: float
    bw_util: float


@dataclasses.dataclass
class RunReport:
    target_name: str
    model_name: str
    cores: int
    clock_mhz: float
    bandwidth_mbps: float
    power_w: float
    kappa: float
    frames: int
    ops_per_frame: float
    bytes_per_frame: float
    rows: list
    accuracy: float = None

    def row(self, threads):
        for r in self.rows:
            if r.threads == threads:
                return r
        raise KeyError(threads)

    def best_row(self):
        return max(self.rows, key=lambda r: (r.fps, -r.threads))

    def to_csv(self):
        lines = ["threads,frame_cycles,frames,makespan_cycles,seconds,fps,latency_ms,"
                 "fps_per_watt,gops,bw_mbps,bw_util"]
        for r in self.rows:
            lines.append("%d,%d,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f" % (
                r.threads, r.frame_cycles, r.frames, r.makespan_cycles, r.seconds,
                r.fps, r.latency_ms, r.fps_per_watt, r.gops, r.bw_mbps, r.bw_util))
        return "\n".join(lines) + "\n"

    def to_text(self):
        head = ("model %s on %s: %d cores @ %.0f MHz, %.2f MB/s shared, kappa=%.4f, "
                "%d frames (simulated accelerator time, not wall clock)") % (
            self.model_name or "-", self.target_name, self.cores, self.clock_mhz,
            self.bandwidth_mbps, self.kappa, self.frames)
        lines = [head]
        if self.accuracy is not None:
            lines.append("top-1 accuracy %.2f%% over evaluated frames" % (100.0 * self.accuracy))
        lines.append("threads      fps   latency_ms   fps/W     GOPS   bw_MB/s   bw_used")
        for r in self.rows:
            lines.append("%7d %8.2f %12.3f %7.2f %8.2f %9.2f %8.1f%%" % (
                r.threads, r.fps, r.latency_ms, r.fps_per_watt, r.gops, r.bw_mbps,
                100.0 * r.bw_util))
        best = self.best_row()
        lines.append("best: %d thread(s) at %.2f fps" % (best.threads, best.fps))
        return "\n".join(lines) + "\n"


def run_benchmark(loaded, threads, frames, kappa=0.0, profile=None,
                  model_name="", images=None, labels=None):
    """Thread sweep of the cycle model. Numeric accuracy is evaluated only
    when images (and labels) are passed, and only through the simulator."""
    tgt = loaded.target
    if profile is None and loaded.cmodel is None:
        raise DpuflowError("run needs a compiled model or a frame profile")
    if frames < 1:
        raise DpuflowError("frames must be >= 1, got %r" % frames)
    ops_per_frame = (profile.ops_per_frame if profile is not None else None) or (
        loaded.cmodel.totals["ops"] if loaded.cmodel is not None else 0.0)
    bytes_per_frame = (profile.bytes_per_frame if profile is not None
                       else loaded.cmodel.totals["bytes_moved"])

    rows = []
    for t in sorted(set(int(t) for t in threads)):
        tau = dpusim.frame_cycles(loaded, t, kappa, profile)
        per_worker = math.ceil(frames / t)  # round-robin deal
        makespan = per_worker * tau
        seconds = makespan / tgt.clock_hz
        fps = frames / seconds
        rows.append(BenchRow(
            threads=t,
            frame_cycles=tau,
            frames=frames,
            makespan_cycles=makespan,
            seconds=seconds,
            fps=fps,
            latency_ms=1e3 * tau / tgt.clock_hz,
            fps_per_watt=fps / tgt.power_w,
            gops=fps * ops_per_frame / 1e9,
            bw_mbps=fps * bytes_per_frame / 1e6,
            bw_util=fps * bytes_per_frame / (tgt.bandwidth_mbps * 1e6),
        ))

    accuracy = None
    if images is not None and labels is not None and len(labels):
        hits = 0
        for img, lab in zip(images, labels):
            cls, _ = dpusim.simulate_classify(loaded, img)
            hits += int(cls == int(lab))
        accuracy = hits / len(labels)
    return RunReport(
        target_name=tgt.name, model_name=model_name, cores=tgt.cores,
        clock_mhz=tgt.clock_mhz, bandwidth_mbps=tgt.bandwidth_mbps, power_w=tgt.power_w,
        kappa=kappa, frames=frames, ops_per_frame=float(ops_per_frame),
        bytes_per_frame=float(bytes_per_frame), rows=rows, accuracy=accuracy,
    )


# ---------------------------------------------------------------------------
# cross-system comparison


@dataclasses.dataclass
class BaselineRow:
    """One system in a comparison. fps and power are measured facts;
    printed_fps_per_watt preserves an externally reported efficiency when it
    disagrees with fps / power, so ratio columns can follow the source."""

    name: str
    fps: float
    power_w: float
    accuracy_pct: float = None
    printed_fps_per_watt: float = None

    @classmethod
    def from_json(cls, doc):
        return cls(
            name=str(doc["name"]),
            fps=float(doc["fps"]),
            power_w=float(doc["power_w"]),
            accuracy_pct=None if doc.get("accuracy_pct") in (None, "") else float(doc["accuracy_pct"]),
            printed_fps_per_watt=None if doc.get("printed_fps_per_watt") in (None, "")
            else float(doc["printed_fps_per_watt"]),
        )

    def to_json(self):
        doc = {"name": self.name, "fps": self.fps, "power_w": self.power_w}
        if self.accuracy_pct is not None:
            doc["accuracy_pct"] = self.accuracy_pct
        if self.printed_fps_per_watt is not None:
            doc["printed_fps_per_watt"] = self.printed_fps_per_watt
        return doc


@dataclasses.dataclass
class ComparisonEntry:
    name: str
    fps: float
    power_w: float
    accuracy_pct: float
    latency_s: float  # time for the whole frame batch
    fps_per_watt: float  # always fps / power
    fps_per_watt_reported: float  # external figure if given, else None
    throughput_ratio: float
    efficiency_ratio: float

    @property
    def ratio_basis(self):
        """Efficiency the ratio column actually used."""
        return self.fps_per_watt_reported if self.fps_per_watt_reported is not None else self.fps_per_watt


@dataclasses.dataclass
class ComparisonReport:
    baseline_name: str
    frames: int
    entries: list
    footnotes: list

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_csv(self):
        lines = ["name,fps,power_w,accuracy_pct,latency_s,fps_per_watt,"
                 "fps_per_watt_reported,throughput_ratio,efficiency_ratio"]
        for e in self.entries:
            lines.append("%s,%.6f,%.6f,%s,%.6f,%.6f,%s,%.6f,%.6f" % (
                e.name, e.fps, e.power_w,
                "" if e.accuracy_pct is None else "%.2f" % e.accuracy_pct,
                e.latency_s, e.fps_per_watt,
                "" if e.fps_per_watt_reported is None else "%.6f" % e.fps_per_watt_reported,
                e.throughput_ratio, e.efficiency_ratio))
        return "\n".join(lines) + "\n"

    def to_text(self):
        lines = ["comparison vs %r over %d frames (fps is simulated accelerator-side "
                 "throughput for sim rows)" % (self.baseline_name, self.frames),
                 "%-16s %9s %7s %7s %10s %8s %8s %8s" % (
                     "system", "fps", "W", "acc%", "s/batch", "fps/W", "thr", "eff")]
        for e in self.entries:
            mark = "*" if e.fps_per_watt_reported is not None else " "
            lines.append("%-16s %9.2f %7.1f %7s %10.2f %7.2f%s %7.2fx %7.2fx" % (
                e.name, e.fps, e.power_w,
                "-" if e.accuracy_pct is None else "%.2f" % e.accuracy_pct,
                e.latency_s, e.fps_per_watt, mark, e.throughput_ratio, e.efficiency_ratio))
        for note in self.footnotes:
            lines.append(note)
        return "\n".join(lines) + "\n"


def compare_report(rows, baseline_name, frames=10000):
    """Derive latency, efficiency and ratio columns from (fps, power) rows.

    Efficiency is always computed as fps / power. When a row carries an
    externally reported figure that disagrees, the computed value is shown,
    the reported one drives the ratio column, and a footnote records the gap.
    """
    if not rows:
        raise DpuflowError("comparison needs at least one row")
    names = [r.name for r in rows]
    if len(set(names)) != len(names):
        raise DpuflowError("comparison row names must be unique")
    base = next((r for r in rows if r.name == baseline_name), None)
    if base is None:
        raise DpuflowError("baseline %r is not among rows: %s" % (baseline_name, ", ".join(names)))
    if any(r.fps <= 0 or r.power_w <= 0 for r in rows):
        raise DpuflowError("fps and power must be positive in every row")

    base_eff = (base.printed_fps_per_watt if base.printed_fps_per_watt is not None
                else base.fps / base.power_w)
    entries, footnotes = [], []
    for r in rows:
        fpw = r.fps / r.power_w
        entries.append(ComparisonEntry(
            name=r.name, fps=r.fps, power_w=r.power_w, accuracy_pct=r.accuracy_pct,
            latency_s=frames / r.fps, fps_per_watt=fpw,
            fps_per_watt_reported=r.printed_fps_per_watt,
            throughput_ratio=r.fps / base.fps,
            efficiency_ratio=(r.printed_fps_per_watt if r.printed_fps_per_watt is not None
                              else fpw) / base_eff,
        ))
        if r.printed_fps_per_watt is not None and abs(r.printed_fps_per_watt - fpw) > 0.005:
            footnotes.append(
                "* %s: computed %.2f fps/W from fps and power; the externally reported "
                "%.2f fps/W drives its efficiency ratio" % (r.name, fpw, r.printed_fps_per_watt))
    return ComparisonReport(baseline_name, frames, entries, footnotes)


def report_rows_from_run(report, thread_counts=None):
    """Lift simulated sweep rows into comparison rows."""
    rows = []
    for r in report.rows:
        if thread_counts is not None and r.threads not in thread_counts:
            continue
        rows.append(BaselineRow(
            name="%s_t%d" % (report.target_name, r.threads),
            fps=r.fps,
            power_w=report.power_w,
            accuracy_pct=None if report.accuracy is None else 100.0 * report.accuracy,
        ))
    return rows


def load_baseline_csv(path):
    """Rows from 'name,fps,power_w[,accuracy_pct][,printed_fps_per_watt]' CSV."""
    p = pathlib.Path(path)
    if not p.exists():
        raise DpuflowError("no such baseline file: %s" % p)
    lines = [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DpuflowError("baseline file %s is empty" % p)
    header = [h.strip() for h in lines[0].split(",")]
    required = ("name", "fps", "power_w")
    if any(h not in header for h in required):
        raise DpuflowError("baseline CSV needs columns %s, got %r" % (", ".join(required), header))
    rows = []
    for ln in lines[1:]:
        vals = dict(zip(header, (v.strip() for v in ln.split(","))))
        rows.append(BaselineRow.from_json({k: v for k, v in vals.items() if v != ""}))
    return rows


# ---------------------------------------------------------------------------
# scenarios


@dataclasses.dataclass
class Scenario:
    name: str
    target_path: pathlib.Path
    model_path: pathlib.Path = None  # compiled model, optional with a profile
    threads: tuple = (1, 2, 3, 4)
    frames: int = 10000
    kappa: float = 0.0
    frame_profile: FrameProfile = None
    baselines: list = dataclasses.field(default_factory=list)
    baseline: str = None
    fit_info: dict = None


def load_scenario(path):
    p = pathlib.Path(path)
    if not p.exists():
        raise DpuflowError("no such scenario file: %s" % p)
    doc = json.loads(p.read_text(encoding="utf-8"))
    if doc.get("format") not in (None, "scenario"):
        raise DpuflowError("%s is a %r file, not a scenario" % (p, doc.get("format")))
    base = p.parent

    def resolve(rel):
        q = pathlib.Path(rel)
        return q if q.is_absolute() else (base / q).resolve()

    if "target" not in doc:
        raise DpuflowError("scenario %s names no target" % p)
    profile = doc.get("frame_profile")
    return Scenario(
        name=doc.get("name", p.stem),
        target_path=resolve(doc["target"]),
        model_path=resolve(doc["model"]) if doc.get("model") else None,
        threads=tuple(int(t) for t in doc.get("threads", (1, 2, 3, 4))),
        frames=int(doc.get("frames", 10000)),
        kappa=float(doc.get("kappa", 0.0)),
        frame_profile=FrameProfile.from_json(profile) if profile else None,
        baselines=[BaselineRow.from_json(b) for b in doc.get("baselines", [])],
        baseline=doc.get("baseline"),
        fit_info=doc.get("fit"),
    )


def scenario_to_json(scenario, relative_to=None):
    def rel(path):
        if path is None:
            return None
        p = pathlib.Path(path)
        if relative_to is not None:
            # may climb with "..", so the scenario keeps working wherever the
            # process later runs from, paths resolve against the scenario file
            return os.path.relpath(p.resolve(), pathlib.Path(relative_to).resolve())
        return str(p)

    doc = {
        "format": "scenario",
        "format_version": 1,
        "name": scenario.name,
        "target": rel(scenario.target_path),
        "threads": list(scenario.threads),
        "frames": scenario.frames,
        "kappa": scenario.kappa,
    }
    if scenario.model_path:
        doc["model"] = rel(scenario.model_path)
    if scenario.frame_profile is not None:
        doc["frame_profile"] = scenario.frame_profile.to_json()
    if scenario.baselines:
        doc["baselines"] = [b.to_json() for b in scenario.baselines]
    if scenario.baseline:
        doc["baseline"] = scenario.baseline
    if scenario.fit_info:
        doc["fit"] = scenario.fit_info
    return doc


def run_scenario(scenario, images=None, labels=None):
    """Execute a scenario end to end: admission, sweep, optional comparison."""
    tgt = target_mod.load_target(scenario.target_path)
    if scenario.model_path is not None:
        cmodel = compiler.load_cmodel(scenario.model_path)
        loaded = dpusim.load_model(cmodel, tgt)
        model_name = cmodel.name
    else:
        target_mod.check_resources(tgt)
        loaded = LoadedModel(None, tgt)
        model_name = ""
    report = run_benchmark(
        loaded, scenario.threads, scenario.frames, scenario.kappa,
        scenario.frame_profile, model_name=model_name, images=images, labels=labels)
    comparison = None
    if scenario.baselines:
        rows = list(scenario.baselines) + report_rows_from_run(report)
        baseline = scenario.baseline or scenario.baselines[0].name
        comparison = compare_report(rows, baseline, scenario.frames)
    return report, comparison


# ---------------------------------------------------------------------------
# fitting a profile to observed throughput


@dataclasses.dataclass
class FitResult:
    core_seconds: float
    kappa: float
    bytes_per_frame: float
    observations: dict  # threads -> fps
    predicted: dict  # threads -> fps from the closed-form model
    residual_pct: dict

    def max_abs_residual_pct(self):
        return max(abs(v) for v in self.residual_pct.values())


def model_fps(threads, core_seconds, kappa, bytes_per_frame, target):
    """Closed-form aggregate throughput of the contention model.

    Compute roof: min(T, cores)/C frames per second (past one frame per core
    the time slicing dilation cancels the extra streams). Memory roof: the
    derated link rate over bytes per frame.
    """
    comp = min(threads, target.cores) / core_seconds
    mem = (target.bandwidth_mbps * 1e6 /
           (1.0 + kappa * max(0, threads - target.cores))) / bytes_per_frame
    return min(comp, mem)


def fit_scenario(observations, target):
    """Recover (core_seconds, kappa, bytes_per_frame) from (threads, fps).

    bytes_per_frame comes straight from the saturated point: at T = cores the
    link is the binding roof, so B = bandwidth / fps(cores). The remaining two
    parameters are least-squares fit on relative fps error.
    """
    obs = {}
    for t, fps in observations:
        t = int(t)
        if t < 1 or fps <= 0:
            raise DpuflowError("observations need threads >= 1 and fps > 0, got (%r, %r)" % (t, fps))
        if t in obs:
            raise DpuflowError("duplicate observation for %d threads" % t)
        obs[t] = float(fps)
    if len(obs) < 2:
        raise DpuflowError("need at least two (threads, fps) observations")
    if target.cores not in obs:
        raise DpuflowError(
            "need an observation at threads == cores (%d) to anchor bytes per frame"
            % target.cores)

    bytes_per_frame = target.bandwidth_mbps * 1e6 / obs[target.cores]
    ts = sorted(obs)

    def residuals(x):
        c, kappa = x
        return [(model_fps(t, c, kappa, bytes_per_frame, target) - obs[t]) / obs[t] for t in ts]

    t0 = min(ts)
    x0 = [min(t0, target.cores) / obs[t0], 0.05]
    sol = least_squares(residuals, x0, bounds=([1e-12, 0.0], [10.0, 100.0]),
                        ftol=1e-12, xtol=1e-12, gtol=1e-12)
    core_seconds, kappa = float(sol.x[0]), float(sol.x[1])
    predicted = {t: model_fps(t, core_seconds, kappa, bytes_per_frame, target) for t in ts}
    residual_pct = {t: 100.0 * (predicted[t] - obs[t]) / obs[t] for t in ts}
    return FitResult(core_seconds, kappa, bytes_per_frame, obs, predicted, residual_pct)


def load_observations_csv(path):
    """(threads, fps) pairs from a two-column CSV with a header."""
    p = pathlib.Path(path)
    if not p.exists():
        raise DpuflowError("no such observations file: %s" % p)
    lines = [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DpuflowError("observations file %s has no data rows" % p)
    header = [h.strip().lower() for h in lines[0].split(",")]
    if header[:2] != ["threads", "fps"]:
        raise DpuflowError("observations CSV must start with 'threads,fps', got %r" % lines[0])
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append((int(parts[0]), float(parts[1])))
    return out
