"""Regenerate every data file shipped with the repository.

Writes the example model manifests, the default board target, the measured
baseline/observation tables, the fitted thread-scaling scenario and the
golden reference outputs for the smallest example model. Everything is
seeded, so rerunning the script reproduces the committed files bit for bit.

Golden values are cross-checked against the independent naive oracles in
tests/oracles.py before they are written; the script aborts if the library
and the oracles disagree.
"""

import json
import pathlib
import sys
import tempfile

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import oracles  # noqa: E402

from dpuflow import bench, compiler, container, dpusim, quantize, zoo  # noqa: E402
from dpuflow import graph as graph_mod  # noqa: E402
from dpuflow import refexec  # noqa: E402
from dpuflow import target as target_mod  # noqa: E402

TARGET_NAME = "zcu104_dual_b4096"

# measured throughput/power rows the comparison tables start from
BASELINES = [
    {"name": "cpu", "fps": 175.47, "power_w": 65.0, "accuracy_pct": 68.62},
    {"name": "gpu", "fps": 223.31, "power_w": 350.0, "accuracy_pct": 68.61},
    {"name": "fpga_t1", "fps": 584.11, "power_w": 60.0, "accuracy_pct": 58.76,
     "printed_fps_per_watt": 9.14},
    {"name": "fpga_t2", "fps": 1021.45, "power_w": 60.0, "accuracy_pct": 58.76},
]
OBSERVATIONS = [(1, 584.11), (2, 1021.45), (3, 920.81)]
# per-frame op count recorded with the fitted profile so the GOPS column of a
# single-stream run reports the board's achieved 0.727 GOPS
OPS_PER_FRAME = 0.727e9 / 584.11

GOLDEN_CALIB_SEED = 7
GOLDEN_CALIB_COUNT = 1000
GOLDEN_BATCH = 100
GOLDEN_PROBES = 8


def write_models():
    outdir = ROOT / "models"
    outdir.mkdir(exist_ok=True)
    for name, maker in sorted(zoo.ARCHITECTURES.items()):
        doc = maker()
        g = graph_mod.build_graph(doc)
        doc["params"] = graph_mod.count_params(g)
        path = outdir / ("%s.json" % name)
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        print("wrote %s (%d params)" % (path.relative_to(ROOT), doc["params"]))


def write_target():
    tgt = target_mod.TargetConfig(arch="B4096", cores=2, name=TARGET_NAME)
    path = target_mod.save_target(tgt, ROOT / "targets" / ("%s.json" % TARGET_NAME))
    print("wrote %s" % path.relative_to(ROOT))
    return tgt


def write_measurement_tables():
    outdir = ROOT / "scenarios"
    outdir.mkdir(exist_ok=True)
    obs = outdir / "board_observations.csv"
    obs.write_text("threads,fps\n" + "".join("%d,%s\n" % (t, f) for t, f in OBSERVATIONS),
                   encoding="utf-8")
    print("wrote %s" % obs.relative_to(ROOT))
    base = outdir / "baselines_cifar10.csv"
    lines = ["name,fps,power_w,accuracy_pct,printed_fps_per_watt"]
    for row in BASELINES:
        lines.append("%s,%s,%s,%s,%s" % (
            row["name"], row["fps"], row["power_w"], row.get("accuracy_pct", ""),
            row.get("printed_fps_per_watt", "")))
    base.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("wrote %s" % base.relative_to(ROOT))


def write_fit_scenario(tgt):
    fit = bench.fit_scenario(OBSERVATIONS, tgt)
    doc = {
        "format": "scenario",
        "format_version": 1,
        "name": "zcu104_fit",
        "target": "../targets/%s.json" % TARGET_NAME,
        "threads": [1, 2, 3, 4, 5, 6],
        "frames": 10000,
        "kappa": fit.kappa,
        "frame_profile": {
            "core_seconds": fit.core_seconds,
            "bytes_per_frame": fit.bytes_per_frame,
            "ops_per_frame": OPS_PER_FRAME,
        },
        "baselines": BASELINES,
        "baseline": "cpu",
        "fit": {
            "observations": [[t, f] for t, f in OBSERVATIONS],
            "residual_pct": {str(t): round(fit.residual_pct[t], 4) for t in sorted(fit.residual_pct)},
        },
    }
    path = ROOT / "scenarios" / "zcu104_fit.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print("wrote %s (kappa=%.7f, max residual %.4f%%)"
          % (path.relative_to(ROOT), fit.kappa, fit.max_abs_residual_pct()))

    # sanity: the stored profile must replay the observed curve within 5%
    scenario = bench.load_scenario(path)
    report, _ = bench.run_scenario(scenario)
    for t, want in OBSERVATIONS:
        got = report.row(t).fps
        err = abs(got - want) / want
        assert err <= 0.05, "fit replay off at T=%d: %.2f vs %.2f" % (t, got, want)
    print("  replay fps: %s" % ", ".join(
        "T=%d %.2f" % (r.threads, r.fps) for r in report.rows))


def _oracle_fp32_logits(g, image):
    """Forward one image through the independent naive fp32 oracles."""
    x = image[None]
    for layer in g.layers:
        if layer.kind == "conv2d":
            x = oracles.naive_conv2d(x, layer.spec.weight, layer.spec.bias,
                                     layer.spec.k, layer.spec.s, layer.spec.pad)
        elif layer.kind == "relu":
            x = np.maximum(x, np.float32(0.0))
        elif layer.kind == "maxpool":
            x = oracles.naive_maxpool(x, layer.spec.k, layer.spec.s)
        elif layer.kind == "globalavgpool":
            x = oracles.naive_globalavgpool(x)
        elif layer.kind == "dense":
            x = oracles.naive_dense(x.reshape(1, -1), layer.spec.weight, layer.spec.bias)
        else:
            raise AssertionError("unexpected kind %s" % layer.kind)
    return x.reshape(-1)


def _oracle_int8_logits(qm, image):
    """Forward one image through the exact-integer INT8 oracles."""
    xq, _ = quantize.quantize_tensor(image[None].astype(np.float32), qm.input_params)
    x = xq
    for ql in qm.layers:
        if ql.kind == "conv2d":
            x = oracles.naive_conv2d_int8(x, ql.weight_q, ql.bias_q, ql.k, ql.s,
                                          ql.pad, ql.shift)
            if ql.fused_relu:
                x = np.maximum(x, np.int8(0))
        elif ql.kind == "relu":
            x = np.maximum(x, np.int8(0))
        elif ql.kind == "maxpool":
            x = oracles.naive_maxpool(x, ql.k, ql.s)
        elif ql.kind == "globalavgpool":
            x = oracles.naive_globalavgpool_int8(x)
        elif ql.kind == "dense":
            x = oracles.naive_dense_int8(x.reshape(1, -1), ql.weight_q, ql.bias_q, ql.shift)
            if ql.fused_relu:
                x = np.maximum(x, np.int8(0))
        else:
            raise AssertionError("unexpected kind %s" % ql.kind)
    return x.reshape(-1)


def write_goldens(tgt):
    g = compiler.fold_batchnorm(zoo.build("testnet8"))
    with tempfile.TemporaryDirectory() as tmp:
        calib_path = bench.write_synthetic_cifar(
            pathlib.Path(tmp) / "calib.bin", GOLDEN_CALIB_COUNT, seed=GOLDEN_CALIB_SEED)
        images, _ = bench.load_cifar10(calib_path)
    cal = quantize.calibrate(g, images, batch_size=GOLDEN_BATCH)
    qm = quantize.quantize_model(g, cal)
    cm = compiler.compile_model(qm, tgt)
    loaded = dpusim.load_model(cm, tgt)
    fused = compiler.fuse_relu(qm)

    probes = images[:GOLDEN_PROBES]
    fp32_logits = np.stack([refexec.forward(g, img[None]).reshape(-1) for img in probes])
    int8_logits = np.stack([quantize.qforward(qm, img).logits.reshape(-1) for img in probes])

    # independent oracle routes must agree before anything is frozen
    for i, img in enumerate(probes[:3]):
        want_fp32 = _oracle_fp32_logits(g, img)
        assert np.array_equal(fp32_logits[i], want_fp32), "fp32 oracle mismatch on probe %d" % i
        want_int8 = _oracle_int8_logits(qm, img)
        assert np.array_equal(int8_logits[i], want_int8), "int8 oracle mismatch on probe %d" % i
        sim_out, _ = dpusim.simulate_frame(loaded, img)
        assert np.array_equal(sim_out.reshape(-1), int8_logits[i]), "simulator diverged on probe %d" % i

    # fp32-vs-INT8 argmax agreement over the whole calibration set
    fp32_classes = np.argmax(refexec.forward(g, images), axis=1).reshape(-1)
    int8_classes = np.array([quantize.qforward(fused, img).class_index for img in images])
    agreement = float(np.mean(fp32_classes == int8_classes))
    print("fp32-vs-int8 agreement over %d images: %.4f" % (len(images), agreement))

    _, trace = dpusim.simulate_frame(loaded, probes[0])

    blob = container.BlobBuilder()
    blob.add("probe_images", probes.astype(np.float32))
    blob.add("fp32_logits", fp32_logits.astype(np.float32))
    blob.add("int8_logits", int8_logits.astype(np.int8))
    blob.add("fp32_classes", fp32_classes.astype(np.int64))
    blob.add("int8_classes", int8_classes.astype(np.int64))
    manifest = {
        "format": "golden",
        "format_version": container.FORMAT_VERSION,
        "model": "testnet8",
        "target": TARGET_NAME,
        "calibration": {"seed": GOLDEN_CALIB_SEED, "count": GOLDEN_CALIB_COUNT,
                        "batch_size": GOLDEN_BATCH},
        "input_fraction_bits": qm.input_params.fraction_bits,
        "layer_fraction_bits": {ql.id: [ql.f_in, ql.f_out] for ql in qm.layers},
        "fingerprint": cm.fingerprint.hex,
        "frame_total_cycles": trace.total_cycles,
        "agreement": {"images": len(images), "value": agreement},
        "tensors": blob.records,
    }
    out = container.save_container(ROOT / "tests" / "golden" / "testnet8_golden.json",
                                   manifest, blob.tobytes())
    print("wrote %s (+ blob, %d cycles/frame)" % (out.relative_to(ROOT), trace.total_cycles))


def main():
    write_models()
    tgt = write_target()
    write_measurement_tables()
    write_fit_scenario(tgt)
    write_goldens(tgt)


if __name__ == "__main__":
    main()
