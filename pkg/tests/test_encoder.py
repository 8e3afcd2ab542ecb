import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dupr import tensor as T
from dupr.encoder import (MAGIC, CheckpointError, EncoderConfig, EncoderPair, forward_pyramid,
                          init_params, project_image, read_tensor_file, write_tensor_file)
from dupr.tensor import ConfigError, Tensor

SMALL = EncoderConfig(channels=(8, 8, 16, 16), blocks=1, groups=4, dim=8)


@pytest.fixture(scope="module")
def params():
    return init_params(SMALL, np.random.default_rng(0))


@pytest.mark.parametrize("blocks", [1, 2])
def test_pyramid_shapes(blocks):
    cfg = EncoderConfig(channels=SMALL.channels, blocks=blocks, groups=4, dim=8)
    img = np.random.default_rng(1).uniform(size=(64, 64, 3))
    levels = forward_pyramid(init_params(cfg, np.random.default_rng(0)), img, cfg)
    assert [lv.shape[2:] for lv in levels] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert [lv.shape[1] for lv in levels] == list(cfg.channels)


@settings(max_examples=6, deadline=None)
@given(h=st.sampled_from([32, 64, 96]), w=st.sampled_from([32, 64, 96]))
def test_pyramid_stride_contract(params, h, w):
    levels = forward_pyramid(params, np.zeros((1, 3, h, w)), SMALL)
    for s, lv in zip((4, 8, 16, 32), levels):
        assert lv.shape[2:] == (-(-h // s), -(-w // s))


def test_non_multiple_inputs_are_padded(params):
    levels = forward_pyramid(params, np.zeros((1, 3, 40, 50)), SMALL)
    assert levels[3].shape[2:] == (2, 2)


def test_pyramid_bitwise_repeatable(params):
    img = np.random.default_rng(2).uniform(size=(2, 64, 64, 3))
    a = forward_pyramid(params, img, SMALL)
    b = forward_pyramid(params, img, SMALL)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))


def test_zero_weight_backbone_is_constant():
    p = init_params(SMALL, np.random.default_rng(0))
    for name, t in p.items():
        if name.endswith(".b"):
            t.data[:] = 0.3
        elif name.endswith(".g") or "conv" in name or "down" in name:
            t.data[:] = 0.0
    img = np.random.default_rng(3).uniform(size=(64, 64, 3))
    for lv in forward_pyramid(p, img, SMALL):
        assert np.ptp(lv.data) == 0.0


def test_image_head_zero_weights_gives_normalized_bias(params):
    p = {k: Tensor(v.data.copy()) for k, v in params.items()}
    b = np.arange(1.0, SMALL.dim + 1)
    p["img2.w1"].data[:] = 0
    p["img2.w2"].data[:] = 0
    p["img2.b2"].data[:] = b
    v = project_image(Tensor(np.full((1, 16, 4, 4), 2.0)), p, 2, SMALL)
    np.testing.assert_allclose(v.data[0], b / np.linalg.norm(b), atol=1e-15)


def test_image_head_identity_mlp(params):
    p = {k: Tensor(v.data.copy()) for k, v in params.items()}
    c = 16
    cfg = EncoderConfig(channels=SMALL.channels, blocks=1, groups=4, dim=c)
    p["img2.w1"], p["img2.w2"] = Tensor(np.eye(c)), Tensor(np.eye(c))
    p["img2.b1"], p["img2.b2"] = Tensor(np.zeros(c)), Tensor(np.zeros(c))
    fmap = np.random.default_rng(4).uniform(0.1, 1.0, (1, c, 1, 1)) * np.ones((1, c, 3, 3))
    v = project_image(Tensor(fmap), p, 2, cfg)
    x = fmap[0, :, 0, 0]
    np.testing.assert_allclose(v.data[0], x / np.linalg.norm(x), atol=1e-15)


def test_image_embedding_unit_norm_and_head_off(params):
    feat = Tensor(np.random.default_rng(5).normal(size=(3, 16, 2, 2)))
    v = project_image(feat, params, 3, SMALL)
    np.testing.assert_allclose(np.linalg.norm(v.data, axis=1), 1.0, atol=1e-12)
    raw = EncoderConfig(**{**SMALL.to_dict(), "image_head": False})
    w = project_image(feat, params, 3, raw)
    assert w.shape == (3, 16)


def test_image_head_channel_mismatch(params):
    with pytest.raises(ConfigError):
        project_image(Tensor(np.ones((1, 8, 2, 2))), params, 3, SMALL)


def test_image_head_gradient(params):
    rng = np.random.default_rng(6)
    feat = Tensor(rng.normal(size=(2, 16, 2, 2)))
    p = {k: T.parameter(v.data.copy()) for k, v in params.items() if k.startswith("img3")}
    r = rng.normal(size=(2, SMALL.dim))
    T.backward(T.tsum(T.mul(project_image(feat, p, 3, SMALL), r)))
    for name, leaf in p.items():
        probe = {k: Tensor(v.data) for k, v in p.items()}

        def f():
            return float(np.sum(project_image(feat, probe, 3, SMALL).data * r))

        num = T.numerical_grad(f, probe[name].data, 1e-6)
        assert T.rel_error(leaf.grad, num) <= 1e-4, name


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(channels=(8, 8, 12, 16), groups=8).validate()


# ---------------------------------------------------------------- momentum twin

def test_key_is_exact_copy_and_stop_grad(params):
    pair = EncoderPair({k: T.parameter(v.data.copy()) for k, v in params.items()}, 0.99)
    assert all(np.array_equal(pair.key[k].data, pair.query[k].data) for k in pair.query)
    assert not any(k.requires_grad for k in pair.key.values())
    pair.query["stem.conv"].data += 1.0
    assert not np.array_equal(pair.key["stem.conv"].data, pair.query["stem.conv"].data)


def test_ema_limits_and_arithmetic():
    q = {"w": T.parameter(np.ones(3))}
    pair = EncoderPair(q, 1.0)
    pair.key["w"].data[:] = 0.0
    pair.momentum_update()
    np.testing.assert_array_equal(pair.key["w"].data, 0.0)
    pair.m_coef = 0.0
    pair.momentum_update()
    np.testing.assert_array_equal(pair.key["w"].data, 1.0)
    pair.key["w"].data[:] = 0.0
    pair.m_coef = 0.99
    pair.momentum_update()
    np.testing.assert_allclose(pair.key["w"].data, 0.01, rtol=0, atol=1e-16)


@given(m=st.floats(0.0, 0.999))
def test_ema_gap_shrinks_geometrically(m):
    pair = EncoderPair({"w": T.parameter(np.array([1.0, -2.0]))}, m)
    pair.key["w"].data[:] = [5.0, 3.0]
    gaps = []
    for _ in range(6):
        gaps.append(np.linalg.norm(pair.key["w"].data - pair.query["w"].data))
        pair.momentum_update()
    for a, b in zip(gaps, gaps[1:]):
        assert b <= a
        assert b == pytest.approx(m * a, rel=1e-9, abs=1e-12)


def test_ema_rejects_bad_coefficient():
    pair = EncoderPair({"w": T.parameter(np.ones(1))}, 1.5)
    with pytest.raises(ConfigError):
        pair.momentum_update()


# ---------------------------------------------------------------- parameter files

def test_tensor_file_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((0, 4))}
    path = write_tensor_file(tmp_path / "x.dupr", {"k": [1, 2]}, arrays)
    meta, back = read_tensor_file(path)
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == MAGIC and struct.unpack_from("<I", raw, 4)[0] == 1


def test_tensor_file_bad_magic_and_version(tmp_path):
    p = tmp_path / "bad.dupr"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        read_tensor_file(p)
    good = write_tensor_file(tmp_path / "g.dupr", {}, {})
    raw = bytearray(good.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        read_tensor_file(p)
