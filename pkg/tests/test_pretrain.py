import math
from fractions import Fraction

import numpy as np
import pytest

from ropim import rng
from ropim.data import Dataset, synthetic_dataset
from ropim.errors import ConfigMismatchError, FormatError, ShapeError, TrainingError
from ropim.pretrain import (Checkpoint, OptimizerState, Reduction, TrainConfig, adamw_step,
                            linear_probe, lr_at, predict, pretrain, read_loss_log, ropim_loss)
from ropim.pretrain.loss import complement_tokens
from ropim.pretrain.optim import decays
from ropim.pretrain.train import init_model, sample_spec
from ropim.sketch import Mode, as_dense, draw_sketch, signed_permutation
from ropim.vit import ViTConfig, ViTModel, patchify

TINY = ViTConfig(image_size=4, channels=1, patch_size=2, embed_dim=4, depth=1, heads=2)


def random_model(cfg, seed, scale=0.4):
    model = ViTModel.init(cfg, seed)
    g = np.random.default_rng(seed + 17)
    for name, t in model.params.items():
        t.data[...] = g.normal(0, scale, t.shape) + (1.0 if ".norm" in name and name.endswith(".weight") else 0)
    return model


# --- an independent dense implementation of the objective ------------------------------

def _ln(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def dense_loss(X, model, spec, reduction="mean"):
    p = {k: t.data for k, t in model.params.items()}
    cfg = model.config
    P = as_dense(spec)
    if spec.mode is Mode.PAPER_SCALED:
        Pinv = spec.K_out / spec.K * P.T
    else:
        Pinv = np.linalg.pinv(P)
    R = Pinv @ P
    C = np.eye(spec.K) - R
    z = np.vstack([p["cls_token"].reshape(1, -1), R @ X @ p["patch_embed.weight"]]) + p["pos_embed"]
    H, D = cfg.heads, cfg.embed_dim
    dh = D // H
    for i in range(cfg.depth):
        q = f"blocks.{i}."
        h = _ln(z, p[q + "norm1.weight"], p[q + "norm1.bias"])
        qkv = h @ p[q + "attn.qkv.weight"] + p[q + "attn.qkv.bias"]
        heads = []
        for a in range(H):
            Q = qkv[:, a * dh:(a + 1) * dh]
            K = qkv[:, D + a * dh:D + (a + 1) * dh]
            V = qkv[:, 2 * D + a * dh:2 * D + (a + 1) * dh]
            S = Q @ K.T / math.sqrt(dh)
            S = np.exp(S - S.max(1, keepdims=True))
            heads.append((S / S.sum(1, keepdims=True)) @ V)
        z = z + np.hstack(heads) @ p[q + "attn.proj.weight"] + p[q + "attn.proj.bias"]
        h = _ln(z, p[q + "norm2.weight"], p[q + "norm2.bias"])
        z = z + _gelu(h @ p[q + "mlp.fc1.weight"] + p[q + "mlp.fc1.bias"]) @ p[q + "mlp.fc2.weight"] \
            + p[q + "mlp.fc2.bias"]
    Xt = z[1:] @ p["decoder.weight"]
    E = np.abs(C @ (X - Xt))
    return E.mean() if reduction == "mean" else E.sum()


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("reduction", ["mean", "sum"])
@pytest.mark.parametrize("seed", range(3))
def test_loss_matches_dense_oracle(mode, reduction, seed):
    model = random_model(TINY, seed)
    X = np.random.default_rng(seed).standard_normal((4, 4))
    spec = draw_sketch(4, 0.5, seed, mode)
    got = float(ropim_loss(X, model, spec, reduction).data)
    assert got == pytest.approx(dense_loss(X, model, spec, reduction), abs=1e-10)


def test_deeper_model_matches_dense_oracle():
    cfg = ViTConfig(image_size=8, channels=3, patch_size=2, embed_dim=16, depth=2, heads=4)
    model = random_model(cfg, 3)
    X = np.random.default_rng(3).standard_normal((16, 12))
    spec = draw_sketch(16, Fraction(1, 7), 8)
    assert float(ropim_loss(X, model, spec).data) == pytest.approx(dense_loss(X, model, spec),
                                                                   abs=1e-10)


def test_batch_loss_is_mean_of_sample_losses():
    model = random_model(TINY, 1)
    X = np.random.default_rng(1).standard_normal((3, 4, 4))
    specs = [draw_sketch(4, 0.5, s) for s in range(3)]
    for red in ("mean", "sum"):
        batch = float(ropim_loss(X, model, specs, red).data)
        singles = [float(ropim_loss(X[b], model, specs[b], red).data) for b in range(3)]
        assert batch == pytest.approx(np.mean(singles), abs=1e-12)


def test_batch_gradient_is_mean_of_sample_gradients():
    model = random_model(TINY, 2)
    X = np.random.default_rng(2).standard_normal((3, 4, 4))
    specs = [draw_sketch(4, 0.5, 10 + s) for s in range(3)]
    model.zero_grad()
    ropim_loss(X, model, specs).backward()
    batch = {k: t.grad.copy() for k, t in model.params.items()}
    acc = {k: np.zeros_like(v) for k, v in batch.items()}
    for b in range(3):
        model.zero_grad()
        ropim_loss(X[b], model, specs[b]).backward()
        for k, t in model.params.items():
            acc[k] += t.grad / 3
    for k in batch:
        np.testing.assert_allclose(batch[k], acc[k], atol=1e-13)


def test_zero_residual_gives_zero_loss_and_gradients():
    # Depth 0 with identity embedding and decoder, zero positions and a lossless
    # sketch reproduces X exactly, so the residual is zero.
    cfg = ViTConfig(image_size=4, channels=1, patch_size=2, embed_dim=4, depth=0, heads=1)
    model = ViTModel.init(cfg, 0)
    model["patch_embed.weight"].data[...] = np.eye(4)
    model["decoder.weight"].data[...] = np.eye(4)
    spec = signed_permutation([2, 0, 3, 1], [1, -1, -1, 1])
    X = np.random.default_rng(0).standard_normal((4, 4))
    np.testing.assert_allclose(predict(X, model, [spec]).data, X, atol=1e-15)
    model.zero_grad()
    loss = ropim_loss(X, model, spec)
    loss.backward()
    assert float(loss.data) == 0.0
    assert all(not np.any(t.grad) for t in model.params.values() if t.grad is not None)


def test_lossless_sketch_gives_zero_loss_for_any_model():
    model = random_model(TINY, 5)
    X = np.random.default_rng(5).standard_normal((4, 4))
    spec = signed_permutation([1, 0, 3, 2], [1, 1, -1, 1])
    for mode in Mode:
        assert float(ropim_loss(X, model, spec.with_mode(mode)).data) == 0.0


def test_same_spec_parameterizes_input_and_complement():
    model = random_model(TINY, 6)
    X = np.random.default_rng(6).standard_normal((4, 4))
    spec, other = draw_sketch(4, 0.5, 1), draw_sketch(4, 0.5, 2)
    assert spec != other
    from ropim import autodiff as ad
    reference = float(ropim_loss(X, model, spec).data)
    manual = float(ad.abs_mean(complement_tokens(ad.sub(X, predict(X, model, [spec])), [spec])).data)
    swapped = float(ad.abs_mean(complement_tokens(ad.sub(X, predict(X, model, [spec])), [other])).data)
    assert manual == reference
    assert swapped != pytest.approx(reference, abs=1e-6)


def test_loss_shape_errors():
    model = random_model(TINY, 0)
    with pytest.raises(ShapeError):
        ropim_loss(np.zeros((2, 4, 4)), model, [draw_sketch(4, 0.5, 0)])
    with pytest.raises(ShapeError):
        ropim_loss(np.zeros((4, 4)), model, draw_sketch(5, 0.5, 0))


# --- optimizer and schedule ----------------------------------------------------------------

def test_adamw_single_step_closed_form():
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, OptimizerState(), lr=0.1, beta1=0.9, beta2=0.95,
               weight_decay=0.0)
    # m_hat = 1, v_hat = 1, update = 0.1 / (1 + 1e-8)
    assert p["w"][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-9)


def test_adamw_two_steps_against_reference():
    g = np.random.default_rng(0)
    w = g.standard_normal(5)
    grads = [g.standard_normal(5) for _ in range(2)]
    p = {"w": w.copy()}
    st = OptimizerState()
    for gr in grads:
        adamw_step(p, {"w": gr}, st, 0.01, 0.9, 0.95, 0.05)
    m = v = 0
    ref = w.copy()
    for t, gr in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * gr
        v = 0.95 * v + 0.05 * gr ** 2
        ref = ref * (1 - 0.01 * 0.05) - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, atol=1e-15)
    assert st.step == 2


def test_adamw_degenerate_cases():
    p = {"w": np.array([1.5, -2.0])}
    st = OptimizerState()
    adamw_step(p, {"w": np.zeros(2)}, st, 0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])
    adamw_step(p, {"w": np.ones(2)}, st, 0.0, weight_decay=0.05)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])
    assert np.any(st.m["w"]) and np.any(st.v["w"])


def test_adamw_rejects_non_finite_before_update():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st = OptimizerState()
    with pytest.raises(TrainingError):
        adamw_step(p, {"a": np.ones(2), "b": np.array([np.nan, 0])}, st, 0.1)
    assert st.step == 0 and np.all(p["a"] == 1)


def test_weight_decay_mask():
    assert decays("blocks.0.attn.qkv.weight", (4, 12))
    assert decays("decoder.weight", (4, 12))
    assert not decays("blocks.0.norm1.weight", (4,))
    assert not decays("blocks.0.attn.qkv.bias", (12,))
    assert not decays("pos_embed", (17, 4))


def test_lr_schedule_points():
    assert lr_at(10, 110, 10, 1e-3) == 1e-3
    assert lr_at(110, 110, 10, 1e-3) == pytest.approx(0, abs=1e-12)
    assert lr_at(60, 110, 10, 1e-3) == pytest.approx(5e-4, abs=1e-15)
    assert lr_at(5, 110, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at(0, 100, 0, 1e-3) == 1e-3
    seq = [lr_at(s, 50, 5, 1.0) for s in range(51)]
    assert all(a <= b for a, b in zip(seq[:5], seq[1:6]))
    assert all(a >= b for a, b in zip(seq[5:], seq[6:]))


def test_default_peak_lr_scaling():
    assert TrainConfig(batch_size=512).peak_lr == pytest.approx(1.5e-4)
    assert TrainConfig(batch_size=16).peak_lr == pytest.approx(1.5e-4 * 16 / 512)
    assert TrainConfig(base_lr=3e-3, scale_lr=False).peak_lr == 3e-3
    assert TrainConfig().rho == Fraction(1, 7)


@pytest.mark.parametrize("kw", [dict(rho=0), dict(rho=1.2), dict(epochs=0), dict(batch_size=0),
                                dict(warmup_epochs=5, epochs=5), dict(precision="f16")])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_dict_roundtrip():
    tc = TrainConfig(rho=Fraction(1, 7), mode="exact", loss_reduction="sum", seed=3)
    back = TrainConfig.from_dict(tc.to_dict())
    assert back == tc and back.rho == Fraction(1, 7)


# --- training loop -------------------------------------------------------------------------

DESK = ViTConfig(image_size=8, channels=3, patch_size=2, embed_dim=16, depth=1, heads=2)


def small_data(n=8, seed=0):
    return synthetic_dataset(n, 8, 3, 2, seed)


def test_lr_zero_leaves_params_bit_exact():
    data = small_data(1)
    tc = TrainConfig(epochs=1, batch_size=1, base_lr=0.0, seed=4)
    before = init_model(DESK, tc).state_dict()
    res = pretrain(data, DESK, tc)
    for k, v in before.items():
        assert np.array_equal(res.model[k].data, v), k


def test_training_is_deterministic(tmp_path):
    data = small_data()
    tc = TrainConfig(epochs=2, batch_size=4, base_lr=1e-3, scale_lr=False, seed=11)
    a = pretrain(data, DESK, tc, tmp_path / "a")
    b = pretrain(data, DESK, tc, tmp_path / "b")
    assert a.log == b.log
    assert (tmp_path / "a/checkpoint.ropm").read_bytes() == (tmp_path / "b/checkpoint.ropm").read_bytes()
    assert (tmp_path / "a/loss_log.csv").read_bytes() == (tmp_path / "b/loss_log.csv").read_bytes()
    c = pretrain(data, DESK, tc.replace(seed=12))
    assert c.log != a.log


def test_loss_log_contents(tmp_path):
    data = small_data(6)
    tc = TrainConfig(epochs=3, batch_size=4, base_lr=1e-3, scale_lr=False, warmup_epochs=1, seed=0)
    res = pretrain(data, DESK, tc, tmp_path)
    rows = read_loss_log(tmp_path / "loss_log.csv")
    assert (tmp_path / "loss_log.csv").read_text().splitlines()[0] == "epoch,step,lr,loss"
    assert len(rows) == 6 and [r[1] for r in rows] == list(range(1, 7))
    assert [r[0] for r in rows] == [1, 1, 2, 2, 3, 3]
    assert rows[1][2] == pytest.approx(1e-3)  # end of warmup
    assert rows[-1][2] == pytest.approx(0, abs=1e-15)
    assert rows == [(e, s, lr, l) for e, s, lr, l in res.log]
    ck = Checkpoint.load(tmp_path / "checkpoint.ropm")
    assert ck.epoch == 3 and ck.optimizer_step == 6


def test_per_sample_sketches_follow_derived_seeds():
    tc = TrainConfig(seed=5)
    a = sample_spec(tc, 64, 1, 3)
    assert a == draw_sketch(64, Fraction(1, 7), rng.derive_seed(5, 1, 3))
    assert a != sample_spec(tc, 64, 1, 4) and a != sample_spec(tc, 64, 2, 3)


def test_shared_spec_ablation_differs():
    data = small_data()
    tc = TrainConfig(epochs=1, batch_size=4, base_lr=1e-3, scale_lr=False, seed=1)
    assert pretrain(data, DESK, tc).log != pretrain(data, DESK, tc.replace(shared_spec=True)).log


def test_f32_training_runs():
    data = small_data()
    tc = TrainConfig(epochs=1, batch_size=4, base_lr=1e-3, scale_lr=False, precision="f32")
    res = pretrain(data, DESK, tc)
    assert res.model.dtype == np.float32 and all(np.isfinite(r[3]) for r in res.log)


def test_non_finite_training_raises():
    data = small_data(4)
    tc = TrainConfig(epochs=1, batch_size=2, seed=0)
    model = init_model(DESK, tc)
    model["decoder.weight"].data[0, 0] = np.inf
    with pytest.raises(TrainingError):
        pretrain(data, DESK, tc, model=model)


def test_image_shape_mismatch():
    with pytest.raises(ConfigMismatchError):
        pretrain(synthetic_dataset(2, 16, 3, 1, 0), DESK, TrainConfig(epochs=1))


# --- checkpoints -----------------------------------------------------------------------------

def test_checkpoint_save_load_save_identical(tmp_path):
    data = small_data()
    tc = TrainConfig(epochs=1, batch_size=4, base_lr=1e-3, scale_lr=False, rho=Fraction(1, 7))
    res = pretrain(data, DESK, tc, tmp_path)
    first = (tmp_path / "checkpoint.ropm").read_bytes()
    ck = Checkpoint.load(tmp_path / "checkpoint.ropm")
    ck.save(tmp_path / "again.ropm")
    assert (tmp_path / "again.ropm").read_bytes() == first
    assert ck.train_config == tc and ck.vit_config == DESK
    m = ck.model()
    for k, t in res.model.params.items():
        np.testing.assert_array_equal(m[k].data, t.data.astype(np.float32).astype(np.float64))
    np.testing.assert_allclose(ck.stats().mean, res.stats.mean, rtol=1e-6)
    st = ck.optimizer_state()
    assert st.step == 2 and set(st.m) == set(res.model.params)


def test_checkpoint_layout():
    model = ViTModel.init(TINY, 0)
    raw = Checkpoint.from_model(model, TrainConfig()).to_bytes()
    assert raw[:4] == b"ROPM" and int.from_bytes(raw[4:8], "little") == 1
    n = int.from_bytes(raw[8:12], "little")
    import json
    assert json.loads(raw[12:12 + n]) == TINY.to_dict()


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3],
                                    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
                                    lambda b: b + b"\0", lambda b: b[:20]])
def test_checkpoint_rejects_corruption(mutate):
    raw = Checkpoint.from_model(ViTModel.init(TINY, 0), TrainConfig()).to_bytes()
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(mutate(raw))


# --- linear probe ------------------------------------------------------------------------------

def test_probe_single_class_is_perfect():
    data = synthetic_dataset(20, 8, 3, 1, 0)
    res = linear_probe(ViTModel.init(DESK, 0), data, probe_epochs=5)
    assert res.accuracy == 1.0 and res.train_accuracy == 1.0


def test_probe_random_labels_near_chance():
    base = synthetic_dataset(400, 8, 3, 1, 3)
    labels = np.repeat([0, 1], 200)[rng.random_permutation(rng.philox(9), 400)]
    data = Dataset(base.images, labels, 2, "train")
    res = linear_probe(ViTModel.init(DESK, 0), data, probe_epochs=20, seed=1)
    assert 0.35 <= res.accuracy <= 0.65


def test_probe_class_mismatch():
    a = synthetic_dataset(8, 8, 3, 2, 0)
    b = synthetic_dataset(8, 8, 3, 4, 1)
    with pytest.raises(ConfigMismatchError):
        linear_probe(ViTModel.init(DESK, 0), a, b, probe_epochs=1)


def test_probe_from_checkpoint_path(tmp_path):
    data = synthetic_dataset(40, 8, 3, 2, 0)
    tc = TrainConfig(epochs=1, batch_size=8, base_lr=1e-3, scale_lr=False)
    pretrain(data, DESK, tc, tmp_path)
    res = linear_probe(tmp_path / "checkpoint.ropm", data, probe_epochs=10)
    assert res.n_train + res.n_test == 40 and 0 <= res.accuracy <= 1
