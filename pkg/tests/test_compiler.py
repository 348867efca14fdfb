import numpy as np
import pytest

import oracles
from dpuflow import compiler as C
from dpuflow import graph as G
from dpuflow import quantize as Q
from dpuflow import refexec as R
from dpuflow.errors import DpuflowError, GraphValidationError, SubgraphGateError
from dpuflow.target import TargetConfig

from conftest import random_images


def _target(**kw):
    kw.setdefault("arch", "B512")
    kw.setdefault("cores", 1)
    return TargetConfig(**kw)


def _bn_doc():
    return {
        "format": "model", "input_shape": [1, 3, 8, 8], "init_seed": 9,
        "layers": [
            {"id": "c1", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 6},
            {"id": "b1", "kind": "batchnorm"},
            {"id": "r1", "kind": "relu"},
            {"id": "c2", "kind": "conv2d", "k": 3, "s": 2, "pad": 1, "c_out": 8},
            {"id": "b2", "kind": "batchnorm"},
            {"id": "r2", "kind": "relu"},
            {"id": "g", "kind": "globalavgpool"},
            {"id": "d", "kind": "dense", "out_features": 5},
        ],
    }


# ---------------------------------------------------------------------------
# batchnorm folding


def test_fold_batchnorm_close_and_structure():
    g = G.build_graph(_bn_doc())
    folded = C.fold_batchnorm(g)
    assert [l.kind for l in folded.layers] == ["conv2d", "relu", "conv2d", "relu",
                                               "globalavgpool", "dense"]
    rng = np.random.default_rng(50)
    x = random_images(rng, g, 8)
    y0, y1 = R.forward(g, x), R.forward(folded, x)
    denom = max(float(np.abs(y0).max()), 1e-30)
    assert float(np.abs(y0 - y1).max()) / denom <= 1e-4


def test_fold_batchnorm_formula_against_direct_algebra():
    g = G.build_graph(_bn_doc())
    conv, bn = g.layer("c1").spec, g.layer("b1").spec
    folded = C.fold_batchnorm(g).layer("c1").spec
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.var.astype(np.float64) + bn.eps)
    assert np.allclose(folded.weight,
                       (conv.weight.astype(np.float64) * scale[:, None, None, None]).astype(np.float32),
                       rtol=0, atol=0)
    want_bias = ((conv.bias.astype(np.float64) - bn.mean) * scale + bn.beta).astype(np.float32)
    assert np.array_equal(folded.bias, want_bias)


def test_fold_batchnorm_idempotent():
    g = C.fold_batchnorm(G.build_graph(_bn_doc()))
    again = C.fold_batchnorm(g)
    assert [l.id for l in again.layers] == [l.id for l in g.layers]
    for a, b in zip(g.layers, again.layers):
        if a.kind == "conv2d":
            assert np.array_equal(a.spec.weight, b.spec.weight)
            assert np.array_equal(a.spec.bias, b.spec.bias)


def test_fold_batchnorm_requires_conv_producer():
    doc = {
        "format": "model", "input_shape": [1, 3, 8, 8], "init_seed": 9,
        "layers": [
            {"id": "r", "kind": "relu"},
            {"id": "b", "kind": "batchnorm"},
        ],
    }
    with pytest.raises(GraphValidationError, match="directly follow"):
        C.fold_batchnorm(G.build_graph(doc))


# ---------------------------------------------------------------------------
# relu fusion


def _quantized(doc_seed=51, images=12):
    g = C.fold_batchnorm(G.build_graph(_bn_doc()))
    rng = np.random.default_rng(doc_seed)
    imgs = random_images(rng, g, images)
    cal = Q.calibrate(g, imgs, batch_size=4)
    return g, imgs, Q.quantize_model(g, cal)


def test_fuse_relu_is_bit_exact_and_idempotent():
    g, imgs, qm = _quantized()
    fused = C.fuse_relu(qm)
    assert [l.kind for l in fused.layers] == ["conv2d", "conv2d", "globalavgpool", "dense"]
    assert all(ql.fused_relu for ql in fused.layers if ql.kind == "conv2d")
    for img in imgs[:5]:
        a, b = Q.qforward(qm, img), Q.qforward(fused, img)
        assert np.array_equal(a.logits, b.logits)
        assert a.class_index == b.class_index
    twice = C.fuse_relu(fused)
    assert [l.id for l in twice.layers] == [l.id for l in fused.layers]


def test_fuse_relu_leaves_leading_relu_alone():
    doc = {
        "format": "model", "input_shape": [1, 2, 4, 4], "init_seed": 1,
        "layers": [
            {"id": "r0", "kind": "relu"},
            {"id": "c", "kind": "conv2d", "k": 1, "s": 1, "pad": 0, "c_out": 2},
        ],
    }
    g = G.build_graph(doc)
    rng = np.random.default_rng(52)
    qm = Q.quantize_model(g, Q.calibrate(g, random_images(rng, g, 3)))
    fused = C.fuse_relu(qm)
    assert [l.id for l in fused.layers] == ["r0", "c"]


# ---------------------------------------------------------------------------
# partitioning and the gate


def test_partition_splits_on_unsupported():
    g, imgs, qm = _quantized()
    segs, offenders = C.partition(qm.layers, ("conv2d", "relu"))
    assert offenders == [("g", "globalavgpool"), ("d", "dense")]
    assert len(segs) == 1  # the conv/relu run before gap


def test_compile_single_subgraph_ok():
    g, imgs, qm = _quantized()
    cm = C.compile_model(qm, _target())
    assert len(cm.layers) == 4  # relus fused away
    assert cm.host_tail == []
    assert cm.totals["ops"] > 0


def test_compile_moves_trailing_softmax_to_host():
    doc = _bn_doc()
    doc["layers"].append({"id": "sm", "kind": "softmax"})
    g = C.fold_batchnorm(G.build_graph(doc))
    rng = np.random.default_rng(53)
    imgs = random_images(rng, g, 6)
    qm = Q.quantize_model(g, Q.calibrate(g, imgs))
    cm = C.compile_model(qm, _target())
    assert [ql.id for ql in cm.host_tail] == ["sm"]
    assert all(cl.q.kind != "softmax" for cl in cm.layers)


def test_compile_interior_softmax_fails_gate():
    doc = {
        "format": "model", "input_shape": [1, 2, 4, 4], "init_seed": 3,
        "layers": [
            {"id": "c1", "kind": "conv2d", "k": 1, "s": 1, "pad": 0, "c_out": 3},
            {"id": "sm", "kind": "softmax"},
            {"id": "c2", "kind": "conv2d", "k": 1, "s": 1, "pad": 0, "c_out": 2},
        ],
    }
    g = G.build_graph(doc)
    rng = np.random.default_rng(54)
    qm = Q.quantize_model(g, Q.calibrate(g, random_images(rng, g, 3)))
    with pytest.raises(SubgraphGateError) as err:
        C.compile_model(qm, _target())
    assert err.value.exit_code == 5
    assert err.value.subgraph_count == 2
    assert ("sm", "softmax") in err.value.offenders


def test_compile_unsupported_op_fails_gate():
    g, imgs, qm = _quantized()
    tgt = _target(supported_ops=("conv2d", "relu", "maxpool", "dense"))  # no gap
    with pytest.raises(SubgraphGateError) as err:
        C.compile_model(qm, tgt)
    assert ("g", "globalavgpool") in err.value.offenders


# ---------------------------------------------------------------------------
# fingerprint


def test_fnv1a64_reference_vectors():
    assert C.fnv1a64(b"") == 0xCBF29CE484222325
    assert C.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert C.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_fnv1a64_matches_reference_on_random_bytes():
    rng = np.random.default_rng(55)
    for _ in range(20):
        data = bytes(rng.integers(0, 256, size=int(rng.integers(0, 64))).tolist())
        assert C.fnv1a64(data) == oracles.fnv1a64_reference(data)


def test_fingerprint_sensitive_to_identity_fields():
    base = _target(arch="B4096", cores=2)
    same = _target(arch="B4096", cores=2)
    assert C.compute_fingerprint(base).digest == C.compute_fingerprint(same).digest
    assert C.compute_fingerprint(_target(arch="B4096", cores=3)).digest != \
        C.compute_fingerprint(base).digest
    assert C.compute_fingerprint(_target(arch="B2304", cores=2)).digest != \
        C.compute_fingerprint(base).digest
    assert C.compute_fingerprint(_target(arch="B4096", cores=2, clock_mhz=250)).digest != \
        C.compute_fingerprint(base).digest
    # non-identity fields do not matter
    assert C.compute_fingerprint(_target(arch="B4096", cores=2, power_w=99)).digest == \
        C.compute_fingerprint(base).digest


def test_verify_fingerprint_reports_both_digests():
    g, imgs, qm = _quantized()
    cm = C.compile_model(qm, _target(arch="B512", cores=1))
    other = _target(arch="B4096", cores=2)
    check = C.verify_fingerprint(cm, other)
    assert not check.ok
    assert check.compiled_digest == cm.fingerprint.digest
    assert check.target_digest == C.compute_fingerprint(other).digest


# ---------------------------------------------------------------------------
# tiling


def test_tiles_fit_buffer_and_cover_output():
    g, imgs, qm = _quantized()
    for buf in (512 * 1024, 8 * 1024, 4 * 1024):
        cm = C.compile_model(qm, _target(buffer_bytes=buf))
        for cl in cm.layers:
            out_bytes = cl.out_shape[0] * cl.out_shape[1] * cl.out_shape[2]
            saves = [i for i in cl.instructions if i.opcode == C.SAVE]
            assert sum(i.nbytes for i in saves) == out_bytes  # exact cover, no overlap
            # per-tile working set honors the buffer
            by_tile = {}
            for i in cl.instructions:
                if i.opcode in (C.LOAD,):
                    by_tile.setdefault(i.tile, 0)
                    by_tile[i.tile] += i.nbytes
            for i in saves:
                by_tile[i.tile] += i.nbytes
            assert all(v <= buf for v in by_tile.values())


def test_smaller_buffer_means_more_tiles():
    doc = {
        "format": "model", "input_shape": [1, 1, 128, 128], "init_seed": 4,
        "layers": [{"id": "c", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 4}],
    }
    g = G.build_graph(doc)
    rng = np.random.default_rng(58)
    qm = Q.quantize_model(g, Q.calibrate(g, random_images(rng, g, 2)))
    big = C.compile_model(qm, _target(buffer_bytes=512 * 1024, supported_ops=("conv2d",)))
    small = C.compile_model(qm, _target(buffer_bytes=4 * 1024, supported_ops=("conv2d",)))
    assert big.layers[0].tiles == 1
    assert small.instruction_count() > big.instruction_count()


def test_halo_rows_are_loaded():
    doc = {
        "format": "model", "input_shape": [1, 1, 128, 128], "init_seed": 4,
        "layers": [{"id": "c", "kind": "conv2d", "k": 3, "s": 1, "pad": 1, "c_out": 1}],
    }
    g = G.build_graph(doc)
    rng = np.random.default_rng(56)
    qm = Q.quantize_model(g, Q.calibrate(g, random_images(rng, g, 2)))
    # 128x128 rows cannot fit the floor-size buffer in one tile
    cm = C.compile_model(qm, _target(buffer_bytes=4096, supported_ops=("conv2d",)))
    cl = cm.layers[0]
    assert cl.tiles > 1
    act_loads = sum(i.nbytes for i in cl.instructions
                    if i.opcode == C.LOAD and i.tensor == "act:input")
    assert act_loads > 128 * 128  # halo rows counted more than once


def test_minimal_tile_too_big_is_an_error():
    # globalavgpool needs its whole input resident, which cannot shrink
    doc = {
        "format": "model", "input_shape": [1, 8, 32, 32], "init_seed": 5,
        "layers": [{"id": "g", "kind": "globalavgpool"}],
    }
    g = G.build_graph(doc)
    rng = np.random.default_rng(57)
    qm = Q.quantize_model(g, Q.calibrate(g, random_images(rng, g, 2)))
    with pytest.raises(DpuflowError, match="exceeds"):
        C.compile_model(qm, _target(buffer_bytes=4097))


def test_buffer_floor_rejected():
    with pytest.raises(DpuflowError, match="buffer_bytes"):
        _target(buffer_bytes=16)


# ---------------------------------------------------------------------------
# persistence


def test_cmodel_save_load_roundtrip(tmp_path):
    g, imgs, qm = _quantized()
    cm = C.compile_model(qm, _target())
    path = C.save_cmodel(cm, tmp_path / "m.json")
    cm2 = C.load_cmodel(path)
    assert cm2.fingerprint == cm.fingerprint
    assert cm2.totals == cm.totals
    assert [cl.q.id for cl in cm2.layers] == [cl.q.id for cl in cm.layers]
    for a, b in zip(cm.layers, cm2.layers):
        assert a.instructions == b.instructions
        assert (a.in_shape, a.out_shape, a.ops, a.bytes_in, a.bytes_out) == \
            (b.in_shape, b.out_shape, b.ops, b.bytes_in, b.bytes_out)
        if a.q.kind in ("conv2d", "dense"):
            assert np.array_equal(a.q.weight_q, b.q.weight_q)
            assert np.array_equal(a.q.bias_q, b.q.bias_q)
    listing = (tmp_path / "m.inst.txt").read_text()
    assert listing.count("\n") == cm.instruction_count()
