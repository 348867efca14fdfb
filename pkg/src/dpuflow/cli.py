"""Command line front end.

Exit codes mirror the library's error classes: 0 success, 2 validation or
input problems, 3 compiled-for-a-different-target fingerprint mismatch,
4 resource budget exceeded, 5 subgraph gate violation.
"""

import functools
import json
import pathlib
import sys

import click
import numpy as np

from . import bench, compiler, dpusim, figures, quantize, zoo
from . import graph as graph_mod
from . import target as target_mod
from .errors import DpuflowError


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DpuflowError as e:
            click.echo("error: %s" % e, err=True)
            sys.exit(e.exit_code)

    return wrapper


@click.group()
def main():
    """INT8 quantize, compile, simulate and benchmark small CNN chains."""


@main.command("quantize")
@click.argument("model", type=click.Path(exists=True, dir_okay=False))
@click.option("--calib", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CIFAR-10 binary batch used for calibration.")
@click.option("--calib-count", default=100, show_default=True, help="Images to calibrate on.")
@click.option("--batch-size", default=100, show_default=True,
              help="Calibration batch size (statistics are batch invariant).")
@click.option("--no-fold", is_flag=True, help="Skip batchnorm folding before calibration.")
@click.option("--out", required=True, type=click.Path(), help="Output quantized model stem.")
@handle_errors
def quantize_cmd(model, calib, calib_count, batch_size, no_fold, out):
    """Post-training INT8 quantization of MODEL."""
    g = graph_mod.load_graph(model)
    if not no_fold:
        g = compiler.fold_batchnorm(g)
    images, _ = bench.load_cifar10(calib, limit=calib_count)
    cal = quantize.calibrate(g, images, batch_size=batch_size)
    qm = quantize.quantize_model(g, cal)
    path = quantize.save_qmodel(qm, out)

    clipped = total = 0
    for img in images:
        _, c = quantize.quantize_tensor(img[None], qm.input_params)
        clipped += c
        total += img.size
    click.echo("quantized %s: %d layers, input scale 2^-%d, calibrated on %d images (batch %d)"
               % (qm.name, len(qm.layers), qm.input_params.fraction_bits, cal.images, cal.batch_size))
    click.echo("input clip rate on calibration set: %.4f%%" % (100.0 * clipped / total))
    click.echo("wrote %s" % path)


@main.command("compile")
@click.argument("qmodel", type=click.Path(exists=True, dir_okay=False))
@click.option("--target", "target_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(), help="Output compiled model stem.")
@handle_errors
def compile_cmd(qmodel, target_path, out):
    """Compile a quantized model for one accelerator target."""
    qm = quantize.load_qmodel(qmodel)
    tgt = target_mod.load_target(target_path)
    cm = compiler.compile_model(qm, tgt)
    path = compiler.save_cmodel(cm, out)
    click.echo("compiled %s for %s: 1 subgraph, %d layers on accelerator, %d host-tail, "
               "%d instructions" % (cm.name, tgt.name, len(cm.layers), len(cm.host_tail),
                                    cm.instruction_count()))
    click.echo("per frame: %d ops, %d bytes moved" % (cm.totals["ops"], cm.totals["bytes_moved"]))
    click.echo("target fingerprint %s" % cm.fingerprint.hex)
    click.echo("wrote %s" % path)


def _parse_threads(text):
    try:
        values = sorted(set(int(v) for v in text.split(",") if v.strip()))
    except ValueError:
        raise DpuflowError("cannot parse thread list %r (want e.g. '1,2,3,4')" % text)
    if not values:
        raise DpuflowError("thread list %r is empty" % text)
    return values


@main.command()
@click.argument("cmodel", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", "target_path", type=click.Path(exists=True, dir_okay=False),
              help="Target file (required unless --scenario names one).")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True, dir_okay=False),
              help="Scenario JSON bundling target, threads, profile and baselines.")
@click.option("--threads", default=None, help="Comma-separated sweep, e.g. 1,2,3,4.")
@click.option("--frames", default=None, type=int, help="Frames per sweep point.")
@click.option("--kappa", default=None, type=float, help="Bandwidth contention derate.")
@click.option("--images", "images_path", type=click.Path(exists=True, dir_okay=False),
              help="CIFAR-10 binary batch for numeric evaluation.")
@click.option("--eval-count", default=0, show_default=True,
              help="Images to classify on the simulator (0 = timing only).")
@click.option("--out", default="report.csv", show_default=True, type=click.Path(),
              help="Sweep CSV; comparison CSV and figures land next to it.")
@click.option("--trace", "trace_path", type=click.Path(),
              help="Write a per-layer cycle trace CSV for one frame.")
@click.option("--no-figures", is_flag=True, help="Skip PNG rendering.")
@handle_errors
def run(cmodel, target_path, scenario_path, threads, frames, kappa, images_path,
        eval_count, out, trace_path, no_figures):
    """Simulate a compiled model (or scenario) and write the report."""
    scenario = None
    if scenario_path:
        scenario = bench.load_scenario(scenario_path)
        if cmodel:
            scenario.model_path = pathlib.Path(cmodel)
        if target_path:
            scenario.target_path = pathlib.Path(target_path)
    else:
        if not target_path:
            raise DpuflowError("give --target or --scenario")
        scenario = bench.Scenario(
            name="cli", target_path=pathlib.Path(target_path),
            model_path=pathlib.Path(cmodel) if cmodel else None)
    if threads is not None:
        scenario.threads = tuple(_parse_threads(threads))
    if frames is not None:
        scenario.frames = frames
    if kappa is not None:
        scenario.kappa = kappa

    images = labels = None
    if images_path and eval_count > 0:
        images, labels = bench.load_cifar10(images_path, limit=eval_count)
    report, comparison = bench.run_scenario(scenario, images=images, labels=labels)

    out = pathlib.Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    click.echo(report.to_text(), nl=False)
    click.echo("wrote %s" % out)
    if comparison is not None:
        cpath = out.with_name(out.stem + "_comparison.csv")
        cpath.write_text(comparison.to_csv(), encoding="utf-8")
        click.echo(comparison.to_text(), nl=False)
        click.echo("wrote %s" % cpath)
    if not no_figures:
        fig = figures.render_run_figure(report, out.with_suffix(".png"))
        click.echo("wrote %s" % fig)
        if comparison is not None:
            fig = figures.render_comparison_figure(
                comparison, out.with_name(out.stem + "_comparison.png"))
            click.echo("wrote %s" % fig)

    if trace_path:
        if scenario.model_path is None:
            raise DpuflowError("--trace needs a compiled model, not just a frame profile")
        cm = compiler.load_cmodel(scenario.model_path)
        tgt = target_mod.load_target(scenario.target_path)
        loaded = dpusim.load_model(cm, tgt)
        shape = cm.input_shape.astuple()
        probe = images[0] if images is not None else np.zeros(shape[1:], np.float32)
        _, trace = dpusim.simulate_frame(loaded, probe)
        tpath = pathlib.Path(trace_path)
        tpath.write_text(trace.to_csv(), encoding="utf-8")
        click.echo("wrote %s" % tpath)
        if not no_figures:
            fig = figures.render_trace_figure(trace, tpath.with_suffix(".png"))
            click.echo("wrote %s" % fig)


@main.command()
@click.option("--observations", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV of measured threads,fps points.")
@click.option("--target", "target_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(), help="Write a ready-to-run scenario JSON here.")
@click.option("--threads", default="1,2,3,4,5,6", show_default=True,
              help="Sweep stored into the scenario.")
@click.option("--frames", default=10000, show_default=True)
@click.option("--ops-per-frame", default=0.0, show_default=True,
              help="Recorded into the profile for GOPS reporting.")
@handle_errors
def fit(observations, target_path, out, threads, frames, ops_per_frame):
    """Fit the contention model to measured throughput points."""
    obs = bench.load_observations_csv(observations)
    tgt = target_mod.load_target(target_path)
    result = bench.fit_scenario(obs, tgt)
    click.echo("fitted on %d points: core_seconds=%.9f  kappa=%.7f  bytes_per_frame=%.1f"
               % (len(result.observations), result.core_seconds, result.kappa,
                  result.bytes_per_frame))
    for t in sorted(result.observations):
        click.echo("  T=%d  observed %.2f  model %.2f  residual %+.3f%%"
                   % (t, result.observations[t], result.predicted[t], result.residual_pct[t]))
    if out:
        out = pathlib.Path(out)
        scenario = bench.Scenario(
            name=out.stem,
            target_path=pathlib.Path(target_path),
            threads=tuple(_parse_threads(threads)),
            frames=frames,
            kappa=result.kappa,
            frame_profile=dpusim.FrameProfile(result.core_seconds, result.bytes_per_frame,
                                              ops_per_frame),
            fit_info={
                "observations": [[t, result.observations[t]] for t in sorted(result.observations)],
                "residual_pct": {str(t): round(result.residual_pct[t], 4)
                                 for t in sorted(result.residual_pct)},
            },
        )
        doc = bench.scenario_to_json(scenario, relative_to=out.parent)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        click.echo("wrote %s" % out)


@main.command()
@click.option("--rows", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV of comparison rows (name,fps,power_w[,accuracy_pct][,printed_fps_per_watt]).")
@click.option("--baseline", required=True, help="Row name the ratios divide by.")
@click.option("--frames", default=10000, show_default=True, help="Batch size for latency.")
@click.option("--out", default="comparison.csv", show_default=True, type=click.Path())
@click.option("--no-figures", is_flag=True, help="Skip PNG rendering.")
@handle_errors
def report(rows, baseline, frames, out, no_figures):
    """Build a cross-system comparison table from measured rows."""
    parsed = bench.load_baseline_csv(rows)
    comp = bench.compare_report(parsed, baseline, frames)
    out = pathlib.Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(comp.to_csv(), encoding="utf-8")
    click.echo(comp.to_text(), nl=False)
    click.echo("wrote %s" % out)
    if not no_figures:
        fig = figures.render_comparison_figure(comp, out.with_suffix(".png"))
        click.echo("wrote %s" % fig)


@main.command()
@click.option("--target", "target_path", required=True, type=click.Path(exists=True, dir_okay=False))
@handle_errors
def resources(target_path):
    """Resource estimate for a target; exit 4 when it does not fit."""
    tgt = target_mod.load_target(target_path)
    est = target_mod.estimate_resources(tgt)
    click.echo("%s: %s x%d @ %.0f MHz" % (tgt.name, tgt.arch, tgt.cores, tgt.clock_mhz))
    click.echo(est.format_table())
    if not est.ok:
        click.echo("error: target does not fit the device", err=True)
        sys.exit(4)


@main.command()
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--count", default=200, show_default=True, help="Number of records.")
@click.option("--seed", default=0, show_default=True)
@handle_errors
def dataset(out, count, seed):
    """Write a synthetic CIFAR-10 style binary batch for calibration demos."""
    path = bench.write_synthetic_cifar(out, count, seed=seed)
    click.echo("wrote %s (%d records, seed %d)" % (path, count, seed))


@main.command()
@click.argument("outdir", type=click.Path(file_okay=False))
@handle_errors
def examples(outdir):
    """Write the bundled example model manifests into OUTDIR."""
    outdir = pathlib.Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, maker in sorted(zoo.ARCHITECTURES.items()):
        doc = maker()
        g = graph_mod.build_graph(doc)
        doc["params"] = graph_mod.count_params(g)
        path = outdir / ("%s.json" % name)
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        click.echo("wrote %s (%d params, %d layers)" % (path, doc["params"], len(doc["layers"])))


if __name__ == "__main__":
    main()
