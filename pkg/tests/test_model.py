import struct

import numpy as np
import pytest

from softcontrast.losses import one_sided
from softcontrast.model import (INPUT_NORM_EPS, CheckpointError, EncoderSpec, HeadSpec, NetworkSpec, SpecError,
                                ema_update, encode, forward_online, forward_target, init, load_checkpoint,
                                save_checkpoint, standardize_inputs)
from softcontrast.tensor import ShapeError, backward
from conftest import unit_rows

MLP = NetworkSpec(EncoderSpec("mlp", (5,), (8,)), HeadSpec(2, 8, 4, "hidden"))
CNN = NetworkSpec(EncoderSpec("cnn", (8, 8, 3), channels=(4, 6), strides=(2, 1)), HeadSpec(2, 8, 4, "all"))
WITH_PREDICTOR = NetworkSpec(MLP.encoder, MLP.projector, HeadSpec(2, 6, 4, "hidden"))


def _inputs(spec, b=4, seed=0):
    return np.random.default_rng(seed).uniform(size=(b,) + tuple(spec.encoder.input_shape))


def _flat(params):
    return np.concatenate([np.ravel(getattr(p, "data", p)) for p in params.values()])


def test_init_is_deterministic_and_seed_dependent():
    a, b, c = init(MLP, 3), init(MLP, 3), init(MLP, 4)
    assert np.array_equal(_flat(a.online), _flat(b.online))
    assert not np.array_equal(_flat(a.online), _flat(c.online))


def test_target_starts_as_exact_copy_without_predictor():
    m = init(WITH_PREDICTOR, 0)
    assert set(m.target) == {k for k in m.online if not k.startswith("predictor.")}
    for k, v in m.target.items():
        assert np.array_equal(v, m.online[k].data)


def test_invalid_specs_rejected():
    with pytest.raises(SpecError):
        init(NetworkSpec(MLP.encoder, MLP.projector, HeadSpec(2, 8, 5)), 0)
    with pytest.raises(SpecError):
        init(NetworkSpec(EncoderSpec("cnn", (8, 8, 3), channels=(4, 6), strides=(2,)), MLP.projector), 0)
    with pytest.raises(SpecError):
        init(NetworkSpec(MLP.encoder, HeadSpec(2, 8, 4, "sometimes")), 0)


@pytest.mark.parametrize("spec", [MLP, CNN, WITH_PREDICTOR], ids=["mlp", "cnn", "predictor"])
def test_forward_online_shape_and_unit_rows(spec):
    z = forward_online(init(spec, 0), _inputs(spec))
    assert z.shape == (4, 4)
    assert np.max(np.abs(np.linalg.norm(z.data, axis=1) - 1)) <= 1e-12
    assert z.requires_grad


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward_online(init(MLP, 0), np.ones((4, 6)))
    with pytest.raises(ShapeError):
        forward_target(init(CNN, 0), np.ones((4, 8, 8)))


@pytest.mark.parametrize("spec", [MLP, CNN], ids=["mlp", "cnn"])
def test_target_equals_online_at_init(spec):
    m = init(spec, 1)
    x = _inputs(spec, seed=1)
    zt = forward_target(m, x)
    assert not zt.requires_grad
    assert np.max(np.abs(zt.data - forward_online(m, x).data)) <= 1e-12


def test_predictor_toggle_changes_only_the_online_head():
    m = init(WITH_PREDICTOR, 2)
    x = _inputs(MLP, seed=2)
    plain = init(MLP, 2)
    # same encoder and projector weights, so the target branches agree
    assert np.allclose(forward_target(m, x).data, forward_target(plain, x).data, atol=1e-12)
    assert not np.allclose(forward_online(m, x).data, forward_online(plain, x).data)


def test_backward_never_touches_target():
    m = init(MLP, 0)
    before = {k: v.copy() for k, v in m.target.items()}
    x1, x2 = _inputs(MLP, seed=1), _inputs(MLP, seed=2)
    queue = unit_rows(np.random.default_rng(0), 8, 4)
    backward(one_sided(forward_online(m, x1), forward_target(m, x2), queue, 0.5, 0.1, 0.07).sce)
    assert all(p.grad is not None for p in m.online.values())
    for k, v in m.target.items():
        assert np.array_equal(v, before[k])


def test_ema_endpoints_and_formula():
    m = init(MLP, 0)
    for p in m.online.values():
        p.data = p.data + 1.0
    start = {k: v.copy() for k, v in m.target.items()}
    ema_update(m, 1.0)
    assert all(np.array_equal(m.target[k], start[k]) for k in start)
    ema_update(m, 0.0)
    assert all(np.array_equal(m.target[k], m.online[k].data) for k in start)
    name = "projector.fc1.bias"
    m.target[name][...] = 1.0
    m.online[name].data[...] = 0.0
    ema_update(m, 0.9)
    assert np.allclose(m.target[name], 0.9, atol=1e-15)
    with pytest.raises(ValueError):
        ema_update(m, 1.5)


def test_ema_converges_geometrically():
    m = init(MLP, 0)
    for p in m.online.values():
        p.data = p.data + np.random.default_rng(1).normal(size=p.shape)
    diff0 = np.linalg.norm(_flat(m.target) - _flat({k: m.online[k] for k in m.target}))
    for k in range(1, 30):
        ema_update(m, 0.8)
        diff = np.linalg.norm(_flat(m.target) - _flat({k: m.online[k] for k in m.target}))
        assert abs(diff - 0.8 ** k * diff0) <= 1e-10


def test_bn_running_stats_follow_ema():
    m = init(MLP, 0)
    forward_online(m, _inputs(MLP, b=16))
    key = "projector.bn0.running_mean"
    assert not np.allclose(m.online_buffers[key], 0)
    assert np.allclose(m.target_buffers[key], 0)
    ema_update(m, 0.5)
    assert np.allclose(m.target_buffers[key], 0.5 * m.online_buffers[key])


def test_encode_returns_pre_projector_features():
    m = init(CNN, 0)
    feats = encode(m, _inputs(CNN))
    assert feats.shape == (4, CNN.encoder.out_dim)
    assert np.array_equal(feats, encode(m, _inputs(CNN), "target"))
    with pytest.raises(ValueError):
        encode(m, _inputs(CNN), "side")


def test_standardize_inputs_statistics():
    x = np.random.default_rng(0).uniform(size=(3, 6, 5, 4))
    out = standardize_inputs(x)
    assert np.allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-12)
    sd = x.std(axis=(1, 2))
    assert np.allclose(out.std(axis=(1, 2)), sd / (sd + INPUT_NORM_EPS), atol=1e-12)
    assert np.allclose(standardize_inputs(np.full((1, 4, 4, 3), 0.3)), 0.0, atol=1e-12)  # flat stays flat


def test_standardized_encoder_ignores_per_channel_offsets():
    spec = NetworkSpec(EncoderSpec("cnn", (8, 8, 3), channels=(4,), strides=(1,), input_norm="standardize"),
                       HeadSpec(2, 8, 4, "hidden"))
    m = init(spec, 0)
    x = _inputs(spec)
    shifted = x + np.array([0.1, -0.2, 0.05])
    assert np.allclose(encode(m, x), encode(m, shifted), atol=1e-12)
    with pytest.raises(SpecError):
        init(NetworkSpec(EncoderSpec("mlp", (5,), (8,), input_norm="whiten"), MLP.projector), 0)


# checkpoints -----------------------------------------------------------------------

def test_checkpoint_keeps_input_norm(tmp_path):
    spec = NetworkSpec(EncoderSpec("cnn", (8, 8, 3), channels=(4,), strides=(1,), input_norm="standardize"),
                       HeadSpec(2, 8, 4, "hidden"))
    save_checkpoint(tmp_path / "m.bin", init(spec, 0))
    assert load_checkpoint(tmp_path / "m.bin")[0].spec.encoder.input_norm == "standardize"


def test_checkpoint_round_trip(tmp_path):
    m = init(WITH_PREDICTOR, 5)
    forward_online(m, _inputs(MLP, b=8))
    ema_update(m, 0.3)
    path = tmp_path / "m.bin"
    save_checkpoint(path, m, {"queue/rows": np.eye(3)}, {"next_epoch": 7})
    back, extra, meta = load_checkpoint(path)
    assert back.spec == m.spec
    for k in m.online:
        assert np.array_equal(back.online[k].data, m.online[k].data)
    for store in ("target", "online_buffers", "target_buffers"):
        for k, v in getattr(m, store).items():
            assert np.array_equal(getattr(back, store)[k], v)
    assert np.array_equal(extra["queue/rows"], np.eye(3))
    assert meta == {"next_epoch": 7}


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, init(MLP, 0))
    raw = path.read_bytes()
    assert raw[:4] == b"SCE1"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    assert raw[8:40] == MLP.digest()


@pytest.mark.parametrize("corrupt", ["magic", "version", "digest", "truncate", "trailing"])
def test_checkpoint_corruption_detected(tmp_path, corrupt):
    path = tmp_path / "m.bin"
    save_checkpoint(path, init(MLP, 0))
    raw = bytearray(path.read_bytes())
    if corrupt == "magic":
        raw[:4] = b"NOPE"
    elif corrupt == "version":
        raw[4:8] = struct.pack("<I", 9)
    elif corrupt == "digest":
        raw[8] ^= 0xFF
    elif corrupt == "truncate":
        raw = raw[:-5]
    else:
        raw += b"\0"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
