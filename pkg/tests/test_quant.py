import numpy as np
import pytest

from wscn import data as D
from wscn import model as M
from wscn import quant as Q
from wscn.errors import QuantError
from wscn.tensor import Tensor


@pytest.fixture(scope="module")
def trained():
    """A small model plus calibration images, shared across tests."""
    mdl = M.build_model(M.WscnConfig(input_size=32, seed=0))
    ds = D.make_dataset(per_class=1, seed=0)
    images, _, _ = D.batch_arrays(ds, np.arange(len(ds)), 32, mdl.np_dtype)
    return mdl, images


# --- affine map -------------------------------------------------------------------


def test_qparams_cover_range_and_zero():
    qp = Q.compute_qparams(-1.0, 3.0)
    assert qp.lo == -1.0 and qp.hi == 3.0
    assert qp.scale == pytest.approx(4.0 / 255)
    # zero quantizes exactly
    z = Q.quantize(np.zeros(1), qp)
    np.testing.assert_array_equal(Q.dequantize(z, qp), np.zeros(1, np.float32))


def test_qparams_widen_to_include_zero():
    qp = Q.compute_qparams(2.0, 3.0)
    assert qp.lo == 0.0 and qp.hi == 3.0
    qp = Q.compute_qparams(-3.0, -2.0)
    assert qp.lo == -3.0 and qp.hi == 0.0


def test_qparams_degenerate_range_padded():
    qp = Q.compute_qparams(0.0, 0.0)
    assert qp.hi > qp.lo and qp.scale > 0
    x = np.zeros(4)
    np.testing.assert_allclose(Q.dequantize(Q.quantize(x, qp), qp), x, atol=qp.scale)


def test_round_trip_error_bounded_by_half_scale():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2.0, 5.0, size=1000)
    qp = Q.compute_qparams(x.min(), x.max())
    back = Q.dequantize(Q.quantize(x, qp), qp, np.float64)
    assert np.abs(back - x).max() <= qp.scale / 2 + 1e-12


def test_quantize_clips_out_of_range():
    qp = Q.compute_qparams(-1.0, 1.0)
    q = Q.quantize(np.asarray([-50.0, 50.0]), qp)
    assert q[0] == Q.QMIN and q[1] == Q.QMAX


def test_quantize_output_dtype():
    qp = Q.compute_qparams(-1.0, 1.0)
    assert Q.quantize(np.zeros(3), qp).dtype == np.int8
    assert Q.dequantize(np.zeros(3, np.int8), qp).dtype == np.float32


# --- calibration ------------------------------------------------------------------


def test_calibrate_covers_all_sites(trained):
    mdl, images = trained
    act = Q.calibrate(mdl, images, batch_size=16)
    names = set(act)
    assert "input" in names and "seg.mask" in names and "cls.probs" in names
    assert any(n.startswith("enc1.") for n in names)
    assert any(n.startswith("dec4.") for n in names)
    # probabilities live in [0, 1]; the calibrated range must contain it
    assert act["cls.probs"].lo <= 0.0 and act["cls.probs"].hi <= 1.0 + 1e-6


def test_observer_merges_batches():
    obs = Q.RangeObserver()
    obs("x", np.asarray([0.0, 2.0]))
    obs("x", np.asarray([-1.0, 1.0]))
    assert obs.ranges["x"] == (-1.0, 2.0)


def test_calibrate_rejects_empty(trained):
    mdl, _ = trained
    with pytest.raises(QuantError):
        Q.calibrate(mdl, np.zeros((0, 1, 32, 32), np.float32))


# --- whole-model quantization --------------------------------------------------------


def test_quantize_model_partitions_params(trained):
    mdl, images = trained
    qm = Q.quantize_model(mdl, images)
    # batch-norm affine params stay float
    assert all(n.endswith((".gamma", ".beta")) or n in mdl.buffers
               for n in qm.float_arrays)
    assert not any(n.endswith((".gamma", ".beta")) for n in qm.weights_q)
    assert set(qm.weights_q) == set(qm.weight_qparams)
    # every param landed somewhere, buffers ride along as float
    assert set(qm.weights_q) | set(qm.float_arrays) == (
        set(mdl.params) | set(mdl.buffers)
    )
    for q in qm.weights_q.values():
        assert q.dtype == np.int8


def test_weight_round_trip_error(trained):
    mdl, images = trained
    qm = Q.quantize_model(mdl, images)
    for name, q in qm.weights_q.items():
        qp = qm.weight_qparams[name]
        back = Q.dequantize(q, qp, np.float64)
        err = np.abs(back - mdl.params[name].data).max()
        assert err <= qp.scale / 2 + 1e-9, name


def test_runtime_model_caches_and_matches_grid(trained):
    mdl, images = trained
    qm = Q.quantize_model(mdl, images)
    rt = qm.runtime_model()
    assert rt is qm.runtime_model()
    name = "enc1.conv.w"
    np.testing.assert_allclose(
        rt.param(name).data,
        Q.dequantize(qm.weights_q[name], qm.weight_qparams[name]),
        rtol=0, atol=0,
    )
    # batch-norm stats carried over untouched
    np.testing.assert_array_equal(rt.buffers["enc1.bn1.mean"],
                                  mdl.buffers["enc1.bn1.mean"])


def test_quantized_forward_close_to_float(trained):
    mdl, images = trained
    qm = Q.quantize_model(mdl, images)
    x = Tensor(images[:4])
    ref = M.forward(mdl, x, training=False)
    out = Q.quantized_forward(qm, x)
    assert out.mask.data.shape == ref.mask.data.shape
    # int8 simulation tracks the float model through 20+ fake-quant sites
    assert np.abs(out.class_probs.data - ref.class_probs.data).max() < 0.25
    agree = (out.mask.data >= 0.5) == (ref.mask.data >= 0.5)
    assert agree.mean() > 0.98


def test_quantized_forward_rejects_external_hook(trained):
    mdl, images = trained
    qm = Q.quantize_model(mdl, images)
    with pytest.raises(QuantError):
        Q.quantized_forward(qm, Tensor(images[:1]), hook=lambda n, a: a)


def test_fake_quant_missing_site_errors():
    hook = Q.FakeQuantHook({})
    with pytest.raises(QuantError, match="input"):
        hook("input", np.zeros(3))


# --- export / import -------------------------------------------------------------------


def test_export_load_round_trip(trained, tmp_path):
    mdl, images = trained
    qm = Q.quantize_model(mdl, images)
    p = tmp_path / "model.int8"
    n = Q.export_quantized(p, qm)
    assert n == p.stat().st_size
    back = Q.load_quantized(p)
    assert back.config.to_dict() == qm.config.to_dict()
    assert set(back.weights_q) == set(qm.weights_q)
    for name in qm.weights_q:
        np.testing.assert_array_equal(back.weights_q[name], qm.weights_q[name])
        assert back.weight_qparams[name].scale == pytest.approx(
            qm.weight_qparams[name].scale)
        assert back.weight_qparams[name].zero_point == \
            qm.weight_qparams[name].zero_point
    assert set(back.act_qparams) == set(qm.act_qparams)
    # the loaded model simulates identically
    x = Tensor(images[:2])
    np.testing.assert_allclose(
        Q.quantized_forward(back, x).class_probs.data,
        Q.quantized_forward(qm, x).class_probs.data,
        rtol=0, atol=1e-6,
    )


def test_export_size_budget(trained, tmp_path):
    mdl, images = trained
    qm = Q.quantize_model(mdl, images)
    int8_path = tmp_path / "model.int8"
    fp32_path = tmp_path / "model.fp32"
    int8_size = Q.export_quantized(int8_path, qm)
    M.save_model(fp32_path, mdl)
    fp32_size = fp32_path.stat().st_size
    assert int8_size <= fp32_size / 3 + 4096


def test_load_rejects_wrong_kind(trained, tmp_path):
    mdl, _ = trained
    p = tmp_path / "float.wscn"
    M.save_model(p, mdl)
    with pytest.raises(QuantError, match="kind"):
        Q.load_quantized(p)


def test_load_rejects_missing_scales(trained, tmp_path):
    from wscn.checkpoint import save_checkpoint

    p = tmp_path / "broken.int8"
    save_checkpoint(
        p,
        {"enc1.conv.w": np.zeros((8, 1, 3, 3), np.int8)},
        meta={"kind": "wscn-int8",
              "config": M.WscnConfig(input_size=32).to_dict()},
        qparams={},
    )
    with pytest.raises(QuantError, match="scale"):
        Q.load_quantized(p)
