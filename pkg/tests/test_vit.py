import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ropim import autodiff as ad
from ropim.errors import ShapeError
from ropim.vit import (ViTConfig, ViTModel, decode, embed, encode, features, parameter_count,
                       patchify, unpatchify)

SMALL = ViTConfig(image_size=8, channels=3, patch_size=2, embed_dim=16, depth=2, heads=2)


def test_patchify_order():
    img = np.arange(16.0).reshape(4, 4, 1)
    T = patchify(img, 2)
    assert T.shape == (4, 4)
    np.testing.assert_array_equal(T[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(T[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(T[2], [8, 9, 12, 13])


def test_patchify_channel_last():
    img = np.arange(2 * 2 * 3.0).reshape(2, 2, 3)
    np.testing.assert_array_equal(patchify(img, 2)[0], img.reshape(-1))


def test_patchify_constant():
    T = patchify(np.full((8, 8, 3), 0.3), 4)
    assert np.all(T == 0.3)


@settings(max_examples=50, deadline=None)
@given(grid=st.integers(1, 5), P=st.integers(1, 4), C=st.integers(1, 3), seed=st.integers(0, 999))
def test_unpatchify_inverts(grid, P, C, seed):
    img = np.random.default_rng(seed).random((grid * P, grid * P, C))
    T = patchify(img, P)
    assert T.shape == (grid * grid, P * P * C)
    np.testing.assert_array_equal(unpatchify(T, grid * P, grid * P, P, C), img)


def test_patchify_rejects_bad_patch():
    with pytest.raises(ShapeError):
        patchify(np.zeros((6, 6, 1)), 4)


@pytest.mark.parametrize("cfg", [
    SMALL, ViTConfig(), ViTConfig(image_size=16, channels=1, patch_size=4, embed_dim=12, depth=0,
                                  heads=3, mlp_ratio=2.0),
    ViTConfig(image_size=32, channels=3, patch_size=2, embed_dim=8, depth=3, heads=4)])
def test_parameter_count_and_shapes(cfg):
    model = ViTModel.init(cfg, 0)
    assert model.num_parameters() == parameter_count(cfg)
    assert sum(int(np.prod(s)) for s in ViTModel.shapes(cfg).values()) == parameter_count(cfg)
    psi = encode(embed(np.zeros((cfg.token_count, cfg.patch_dim)), model), model)
    assert psi.shape == (cfg.token_count + 1, cfg.embed_dim)
    img = np.random.default_rng(0).random((cfg.image_size, cfg.image_size, cfg.channels))
    X = patchify(img, cfg.patch_size)
    assert decode(encode(embed(X, model), model), model).shape == X.shape


def test_parameter_count_pinned():
    # 2 blocks of width 16, 16 tokens of width 12: worked out by hand.
    per_block = 32 + 16 * 48 + 48 + 256 + 16 + 32 + 16 * 64 + 64 + 64 * 16 + 16
    assert parameter_count(SMALL) == 12 * 16 + 17 * 16 + 16 + 2 * per_block + 16 * 12


def test_init_conventions():
    model = ViTModel.init(ViTConfig(embed_dim=64, depth=1, heads=2), 3)
    for name, t in model.params.items():
        if name.endswith(".bias") or name in ("pos_embed", "cls_token"):
            assert not np.any(t.data), name
        elif ".norm" in name:
            assert np.all(t.data == 1), name
        else:
            assert np.abs(t.data).max() <= 0.04 + 1e-12, name  # truncated at 2 sigma
            assert 0.01 < t.data.std() < 0.02, name
    assert ViTModel.init(SMALL, 3).state_dict().keys() == ViTModel.init(SMALL, 4).state_dict().keys()
    a, b = ViTModel.init(SMALL, 3), ViTModel.init(SMALL, 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)


def test_embed_examples():
    cfg = ViTConfig(image_size=4, channels=1, patch_size=2, embed_dim=4, depth=0, heads=1)
    model = ViTModel.init(cfg, 0)
    model["patch_embed.weight"].data[...] = np.eye(4)
    X = np.random.default_rng(1).standard_normal((4, 4))
    np.testing.assert_array_equal(embed(X, model).data, X)
    assert not np.any(embed(np.zeros((4, 4)), model).data)
    m2 = ViTModel.init(SMALL, 5)
    X = np.random.default_rng(2).standard_normal((16, 12))
    np.testing.assert_allclose(embed(X, m2).data, X @ m2["patch_embed.weight"].data, atol=1e-12)


def test_depth_zero_encoder():
    cfg = ViTConfig(image_size=8, channels=3, patch_size=2, embed_dim=16, depth=0, heads=2)
    g = np.random.default_rng(0)
    model = ViTModel.init(cfg, 0)
    model["pos_embed"].data[...] = g.standard_normal(model["pos_embed"].shape)
    model["cls_token"].data[...] = g.standard_normal(model["cls_token"].shape)
    phi = g.standard_normal((16, 16))
    expected = np.vstack([model["cls_token"].data.reshape(1, -1), phi]) + model["pos_embed"].data
    np.testing.assert_allclose(encode(phi, model).data, expected, atol=1e-15)


def test_decode_examples():
    model = ViTModel.init(SMALL, 1)
    assert not np.any(decode(np.zeros((17, 16)), model).data)
    psi = np.random.default_rng(3).standard_normal((17, 16))
    np.testing.assert_allclose(decode(psi, model).data, psi[1:] @ model["decoder.weight"].data,
                               atol=1e-12)
    model["decoder.weight"].data[...] = 0
    assert not np.any(decode(psi, model).data)
    with pytest.raises(ShapeError):
        decode(np.zeros((16, 16)), model)


def _random_model(cfg, seed, scale=0.3):
    model = ViTModel.init(cfg, seed)
    g = np.random.default_rng(seed + 100)
    for name, t in model.params.items():
        t.data[...] = g.normal(0, scale, t.shape) + (1.0 if ".norm" in name and name.endswith(".weight") else 0)
    return model


@pytest.mark.parametrize("seed", range(3))
def test_attention_equivariance(seed):
    model = _random_model(SMALL, seed)
    model["pos_embed"].data[...] = 0
    phi = np.random.default_rng(seed).standard_normal((16, 16))
    perm = np.random.default_rng(seed + 1).permutation(16)
    out = encode(phi, model).data
    out_p = encode(phi[perm], model).data
    np.testing.assert_allclose(out_p[1:], out[1:][perm], atol=1e-12)
    np.testing.assert_allclose(out_p[0], out[0], atol=1e-12)


def test_attention_rows_sum_to_one():
    model = _random_model(SMALL, 0, scale=1.0)
    maps = []
    encode(np.random.default_rng(0).uniform(-10, 10, (16, 16)), model, attention_maps=maps)
    assert len(maps) == SMALL.depth
    for A in maps:
        assert A.shape == (SMALL.heads, 17, 17)
        np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-6)


def test_batched_matches_single():
    model = _random_model(SMALL, 2)
    X = np.random.default_rng(5).standard_normal((3, 16, 12))
    batched = decode(encode(embed(X, model), model), model).data
    for b in range(3):
        single = decode(encode(embed(X[b], model), model), model).data
        np.testing.assert_allclose(batched[b], single, atol=1e-13)


def test_forward_finite_over_many_seeds():
    cfg = ViTConfig(image_size=4, channels=3, patch_size=2, embed_dim=8, depth=2, heads=2)
    for seed in range(1000):
        g = np.random.default_rng(seed)
        model = ViTModel.init(cfg, seed)
        X = g.uniform(-10, 10, (4, cfg.patch_dim))
        out = decode(encode(embed(X, model), model), model).data
        assert np.all(np.isfinite(out)), seed


def test_features_exclude_cls():
    model = _random_model(SMALL, 4)
    X = np.random.default_rng(6).standard_normal((16, 12))
    psi = encode(embed(X, model), model).data
    np.testing.assert_allclose(features(X, model), psi[1:].mean(axis=0))
    model["cls_token"].data[...] += 100.0
    psi2 = encode(embed(X, model), model).data
    assert not np.allclose(psi2[0], psi[0])


def test_state_dict_roundtrip_and_errors():
    a = _random_model(SMALL, 1)
    b = ViTModel.init(SMALL, 9)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)
    bad = a.state_dict()
    bad["pos_embed"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)


@pytest.mark.parametrize("kw", [dict(image_size=10, patch_size=4), dict(embed_dim=10, heads=3),
                                dict(depth=-1), dict(patch_size=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ViTConfig(**kw)


def test_config_dict_roundtrip():
    assert ViTConfig.from_dict(SMALL.to_dict()) == SMALL


def test_model_gradients_flow_everywhere():
    model = _random_model(SMALL, 0)
    X = np.random.default_rng(0).standard_normal((16, 12))
    loss = ad.abs_mean(decode(encode(embed(X, model), model), model))
    loss.backward()
    # The CLS row is dropped before decoding but reaches patch rows through attention.
    for name, t in model.params.items():
        assert t.grad is not None and np.any(t.grad), name
