"""Regression checks against the committed golden outputs.

The golden container freezes the full pipeline on the smallest example model:
calibration scales, compiled fingerprint, per-frame cycle count, fp32 and
INT8 logits on probe images, and the fp32-vs-INT8 class agreement over the
whole calibration set. scripts/make_data.py regenerates it; these tests fail
if any pass drifts numerically.
"""

import numpy as np
import pytest

from dpuflow import bench, compiler, container, dpusim, quantize, refexec, zoo
from dpuflow import target as target_mod

from conftest import GOLDEN, TARGETS


@pytest.fixture(scope="module")
def golden():
    manifest, blob = container.load_container(GOLDEN / "testnet8_golden.json",
                                              expected_format="golden")
    tensors = container.attach_tensors(manifest, blob)
    return manifest, tensors


@pytest.fixture(scope="module")
def rebuilt(golden, tmp_path_factory):
    manifest, _ = golden
    cal_info = manifest["calibration"]
    tmp = tmp_path_factory.mktemp("golden_calib")
    path = bench.write_synthetic_cifar(tmp / "calib.bin", cal_info["count"],
                                       seed=cal_info["seed"])
    images, _ = bench.load_cifar10(path)
    g = compiler.fold_batchnorm(zoo.build(manifest["model"]))
    cal = quantize.calibrate(g, images, batch_size=cal_info["batch_size"])
    qm = quantize.quantize_model(g, cal)
    tgt = target_mod.load_target(TARGETS / ("%s.json" % manifest["target"]))
    cm = compiler.compile_model(qm, tgt)
    loaded = dpusim.load_model(cm, tgt)
    return g, qm, loaded, images


def test_stored_agreement_is_self_consistent(golden):
    manifest, tensors = golden
    agree = manifest["agreement"]
    fp32_cls, int8_cls = tensors["fp32_classes"], tensors["int8_classes"]
    assert len(fp32_cls) == agree["images"]
    assert float(np.mean(fp32_cls == int8_cls)) == pytest.approx(agree["value"])


def test_calibration_scales_match(golden, rebuilt):
    manifest, _ = golden
    g, qm, loaded, images = rebuilt
    assert qm.input_params.fraction_bits == manifest["input_fraction_bits"]
    stored = manifest["layer_fraction_bits"]
    assert {ql.id: [ql.f_in, ql.f_out] for ql in qm.layers} == stored


def test_fingerprint_matches(golden, rebuilt):
    manifest, _ = golden
    _, _, loaded, _ = rebuilt
    assert loaded.cmodel.fingerprint.hex == manifest["fingerprint"]


def test_probe_logits_bit_exact(golden, rebuilt):
    manifest, tensors = golden
    g, qm, loaded, _ = rebuilt
    probes = tensors["probe_images"]
    for i, img in enumerate(probes):
        fp32 = refexec.forward(g, img[None]).reshape(-1)
        assert np.array_equal(fp32, tensors["fp32_logits"][i]), "fp32 drift, probe %d" % i
        q = quantize.qforward(qm, img)
        assert np.array_equal(q.logits.reshape(-1), tensors["int8_logits"][i]), \
            "int8 drift, probe %d" % i
        sim, trace = dpusim.simulate_frame(loaded, img)
        assert np.array_equal(sim.reshape(-1), tensors["int8_logits"][i])
    assert trace.total_cycles == manifest["frame_total_cycles"]


def test_probe_classes_match_stored_head(golden):
    manifest, tensors = golden
    n = len(tensors["probe_images"])
    stored_int8 = np.argmax(tensors["int8_logits"], axis=1)
    assert np.array_equal(stored_int8, tensors["int8_classes"][:n])
    stored_fp32 = np.argmax(tensors["fp32_logits"], axis=1)
    assert np.array_equal(stored_fp32, tensors["fp32_classes"][:n])
