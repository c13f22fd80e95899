import numpy as np
import pytest

from wscn import model as M
from wscn.errors import CheckpointError, ConfigError, ShapeError
from wscn.losses import bce_dice, categorical_ce, npair_contrastive
from wscn.tensor import Tape, Tensor, backward


def small_config(**kw):
    kw.setdefault("input_size", 32)
    return M.WscnConfig(**kw)


def _rand_input(n, size, seed=0):
    return Tensor(np.random.default_rng(seed).random((n, 1, size, size),
                                                     dtype=np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        M.WscnConfig(input_size=50)  # not a multiple of 16
    with pytest.raises(ConfigError):
        M.WscnConfig(num_classes=0)
    with pytest.raises(ConfigError):
        M.WscnConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        M.WscnConfig(dtype="float16")


def test_config_dict_round_trip():
    cfg = M.WscnConfig(input_size=64, seed=9)
    assert M.WscnConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_count_default_architecture():
    m = M.build_model()
    assert M.count_params(m) == 83975
    # fits comfortably in float32 under 0.6 MB
    assert M.count_params(m) * 4 <= 600_000


def test_parameter_count_invariant_to_input_size():
    # fully convolutional trunk + GAP heads: weight count is size-free
    assert (M.count_params(M.build_model(small_config()))
            == M.count_params(M.build_model()))


def test_flop_count_scale():
    m = M.build_model()
    macs = M.count_flops(m)
    assert 0.8e8 < macs < 1.3e8
    # quarter resolution => roughly 1/16 the multiplies
    m2 = M.build_model(M.WscnConfig(input_size=112))
    assert macs / M.count_flops(m2) == pytest.approx(4.0, rel=0.15)


def test_forward_output_shapes_and_ranges():
    m = M.build_model(small_config())
    out = M.forward(m, _rand_input(3, 32))
    assert out.class_probs.shape == (3, 38)
    assert out.mask.shape == (3, 1, 32, 32)
    assert out.embedding.shape == (3, 128)
    np.testing.assert_allclose(out.class_probs.data.sum(axis=1), 1.0, rtol=1e-5)
    assert (out.mask.data > 0).all() and (out.mask.data < 1).all()
    np.testing.assert_allclose(np.linalg.norm(out.embedding.data, axis=1),
                               1.0, rtol=1e-5)


def test_encoder_spatial_ladder():
    # hooks observe every stage; check the downsample/upsample ladder at 224
    m = M.build_model()
    shapes = {}

    def spy(name, a):
        shapes[name] = a.shape
        return a

    M.forward(m, _rand_input(1, 224), hook=spy)
    assert shapes["enc1.relu2"] == (1, 8, 224, 224)
    assert shapes["enc1.pool"] == (1, 8, 112, 112)
    assert shapes["enc2.pool"] == (1, 16, 56, 56)
    assert shapes["enc3.pool"] == (1, 16, 28, 28)
    assert shapes["enc4.pool"] == (1, 32, 14, 14)
    assert shapes["enc5.relu2"] == (1, 64, 14, 14)
    assert shapes["dec1.tconv"] == (1, 32, 28, 28)
    assert shapes["dec1.concat"] == (1, 64, 28, 28)   # 32 up + 32 skip
    assert shapes["dec2.concat"] == (1, 32, 56, 56)   # 16 + 16
    assert shapes["dec3.concat"] == (1, 32, 112, 112)
    assert shapes["dec4.concat"] == (1, 16, 224, 224)  # 8 + 8
    assert shapes["seg.mask"] == (1, 1, 224, 224)
    assert shapes["gap"] == (1, 64)
    assert shapes["cls.probs"] == (1, 38)
    assert shapes["proj.embed"] == (1, 128)


def test_input_validation():
    m = M.build_model(small_config())
    with pytest.raises(ShapeError):
        M.forward(m, Tensor(np.zeros((1, 1, 48, 48), dtype=np.float32)))
    with pytest.raises(ShapeError):
        M.forward(m, Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


def test_forward_accepts_plain_arrays():
    m = M.build_model(small_config())
    size = m.config.input_size
    arr = np.random.default_rng(0).random((2, 1, size, size))
    a = M.forward(m, arr)
    b = M.forward(m, Tensor(arr.astype(m.np_dtype)))
    np.testing.assert_array_equal(a.class_probs.data, b.class_probs.data)
    assert M.encode(m, arr).shape == (2, m.config.embedding_dim)


def test_deterministic_build_and_eval_forward():
    a = M.build_model(small_config(seed=5))
    b = M.build_model(small_config(seed=5))
    x = _rand_input(2, 32)
    np.testing.assert_array_equal(M.forward(a, x).mask.data,
                                  M.forward(b, x).mask.data)
    c = M.build_model(small_config(seed=6))
    assert not np.array_equal(a.params["enc1.conv.w"].data,
                              c.params["enc1.conv.w"].data)


def test_gradient_census_all_params():
    # one combined objective must touch every parameter tensor
    m = M.build_model(small_config())
    rng = np.random.default_rng(0)
    x = _rand_input(4, 32)
    masks = Tensor((rng.random((4, 1, 32, 32)) > 0.8).astype(np.float32))
    labels = np.asarray([1, 2, 2, 1])
    onehot = np.zeros((4, 38), dtype=np.float32)
    onehot[np.arange(4), labels] = 1.0
    with Tape() as tape:
        out = M.forward(m, x, training=True)
        emb = M.encode(m, x, training=True)
        loss = (bce_dice(out.mask, masks)
                + categorical_ce(out.class_probs, onehot)
                + npair_contrastive(emb, labels))
    backward(tape, loss)
    missing = [n for n, p in m.params.items() if p.grad is None]
    assert missing == []
    zero = [n for n, p in m.params.items() if not np.any(p.grad)]
    # biases of dead ReLUs aside, everything should see signal
    assert len(zero) <= 2, zero


def test_freeze_encoder_trainability_and_eval_mode():
    m = M.build_model(small_config())
    M.freeze_encoder(m)
    trainable = set(m.trainable_params())
    assert not any(n.startswith(("enc", "proj")) for n in trainable)
    assert any(n.startswith("dec") for n in trainable)
    assert any(n.startswith("cls") for n in trainable)
    # frozen encoder must run in eval mode even when training=True:
    # encoder running stats stay untouched (decoder BNs still train)
    before = {n: b.copy() for n, b in m.buffers.items()}
    M.forward(m, _rand_input(2, 32), training=True)
    for n, b in m.buffers.items():
        if n.startswith("enc"):
            np.testing.assert_array_equal(b, before[n])
        else:
            assert not np.array_equal(b, before[n]), n
    M.unfreeze_encoder(m)
    assert set(m.trainable_params()) == set(m.params)


def test_training_mode_updates_bn_buffers():
    m = M.build_model(small_config())
    before = {n: b.copy() for n, b in m.buffers.items()}
    M.forward(m, _rand_input(2, 32), training=True)
    changed = sum(not np.array_equal(m.buffers[n], before[n]) for n in before)
    assert changed == len(before)


def test_hook_rejected_on_tape():
    m = M.build_model(small_config())
    with Tape():
        with pytest.raises(ConfigError):
            M.forward(m, _rand_input(1, 32), hook=lambda n, a: a)


def test_state_round_trip_exact(tmp_path):
    m = M.build_model(small_config(seed=3))
    # drift the state so we are not saving pristine init
    for p in m.params.values():
        p.data += 0.01
    path = tmp_path / "model.wscn"
    M.save_model(path, m)
    m2 = M.load_model(path)
    assert m2.config == m.config
    for n, p in m.params.items():
        np.testing.assert_array_equal(p.data, m2.params[n].data)
    for n, b in m.buffers.items():
        np.testing.assert_array_equal(b, m2.buffers[n])
    x = _rand_input(1, 32)
    np.testing.assert_array_equal(M.forward(m, x).mask.data,
                                  M.forward(m2, x).mask.data)


def test_load_model_rejects_other_kinds(tmp_path):
    from wscn.checkpoint import save_checkpoint
    path = tmp_path / "bad.wscn"
    save_checkpoint(path, {"a": np.zeros(3, dtype=np.float32)},
                    meta={"kind": "other"})
    with pytest.raises(CheckpointError):
        M.load_model(path)


def test_load_state_arrays_validates():
    m = M.build_model(small_config())
    state = m.state_arrays()
    state.pop("cls.fc1.w")
    with pytest.raises(ShapeError):
        m.load_state_arrays(state)
    state = m.state_arrays()
    state["cls.fc1.w"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        m.load_state_arrays(state)


def test_snapshot_is_decoupled():
    m = M.build_model(small_config())
    snap = m.snapshot()
    m.params["cls.fc2.b"].data += 1.0
    assert not np.array_equal(snap["cls.fc2.b"], m.params["cls.fc2.b"].data)
