"""Model assembly, loss, weight persistence, config text and the training loop."""

import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssmflow import tensor as T
from ssmflow.config import ConfigError, ModelConfig, tiny_config
from ssmflow.gradcheck import check
from ssmflow.model import MambaFlow, count_parameters, sequence_loss, upsample_flow
from ssmflow.synthetic import gen_synthetic, split_holdout
from ssmflow.tensor import ArgumentError, ShapeError, Tensor
from ssmflow.train import DivergenceError, TrainSettings, clip_grad_norm, train_toy
from ssmflow.weights import (
    TruncatedFileError,
    UnsupportedVersionError,
    WeightFormatError,
    WeightStore,
    load_weights,
    save_weights,
)


def micro(**kw):
    base = dict(dim=8, depth=1, d_state=4, hidden_dim=8, motion_dim=4, radius=1, precision="float64")
    base.update(kw)
    return tiny_config(**base)


@pytest.fixture(scope="module")
def micro_data():
    return split_holdout(gen_synthetic(3, 10, size=16, max_disp=2))


# -- model ------------------------------------------------------------------------


def test_indivisible_images_suggest_padding():
    m = MambaFlow(micro())
    img = Tensor(np.zeros((1, 18, 16, 3)))
    with pytest.raises(ShapeError, match="pad to 20x16"):
        m(img, img)


def test_unbatched_and_batched_inputs_agree():
    rng = np.random.default_rng(0)
    m = MambaFlow(micro())
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    single = m(Tensor(a), Tensor(b)).flow.data
    batched = m(Tensor(a[None]), Tensor(b[None])).flow.data[0]
    np.testing.assert_allclose(single, batched, atol=1e-12)
    assert single.shape == (16, 16, 2)


def test_forward_is_deterministic_and_reports_stage_timings():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.uniform(size=(1, 16, 16, 3))), Tensor(rng.uniform(size=(1, 16, 16, 3)))
    o1, o2 = MambaFlow(micro())(a, b), MambaFlow(micro())(a, b)
    np.testing.assert_array_equal(o1.flow.data, o2.flow.data)
    assert set(o1.timings) == {"backbone", "polymamba", "matching", "pulsemamba"}


def test_backbone_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    m = MambaFlow(micro())
    img = Tensor(rng.uniform(size=(1, 8, 8, 3)))
    w = m.backbone.head.weight
    res = check("backbone", lambda: m.extract_features(img, img)[0], [w], tol=1e-4, max_entries=6)
    assert res.passed, res.line()


def test_upsample_scales_vectors_by_the_factor():
    V = Tensor(np.broadcast_to([1.0, -0.5], (1, 2, 2, 2)).copy())
    up = upsample_flow(V, 4).data
    assert up.shape == (1, 8, 8, 2)
    np.testing.assert_allclose(up, np.broadcast_to([4.0, -2.0], up.shape), atol=1e-14)


@pytest.mark.parametrize("toggle", ["use_self", "use_cross", "use_mlp", "use_pos", "use_aga"])
def test_component_toggles_shrink_the_model(toggle):
    full = count_parameters(MambaFlow(micro()))["total"]
    assert count_parameters(MambaFlow(micro(**{toggle: False})))["total"] < full


# -- loss -------------------------------------------------------------------------


@given(st.floats(0.05, 1.0), st.integers(1, 4))
def test_sequence_loss_weights_follow_gamma(gamma, n):
    gt = np.zeros((2, 3, 2))
    flows = [Tensor(np.full((2, 3, 2), 0.5)) for _ in range(n)]
    expected = sum(gamma ** (n - 1 - i) for i in range(n)) * 1.0
    assert sequence_loss(flows, gt, gamma).item() == pytest.approx(expected, rel=1e-12)


def test_sequence_loss_errors():
    with pytest.raises(ArgumentError):
        sequence_loss([Tensor(np.zeros((2, 2, 2)))], np.zeros((2, 2, 2)), gamma=0.0)
    with pytest.raises(ShapeError):
        sequence_loss([Tensor(np.zeros((2, 2, 2)))], np.zeros((2, 3, 2)))


# -- weights and config -------------------------------------------------------------


def test_weight_file_layout_starts_with_magic_and_version(tmp_path):
    store = WeightStore.from_model(MambaFlow(micro()))
    p = tmp_path / "w.ssmf"
    save_weights(store, p)
    raw = p.read_bytes()
    assert raw[:4] == b"SSMF" and struct.unpack("<I", raw[4:8])[0] == 1
    cfg_len = struct.unpack("<I", raw[8:12])[0]
    assert ModelConfig.from_text(raw[12:12 + cfg_len].decode()) == store.config


def test_weights_roundtrip_into_a_fresh_model(tmp_path):
    cfg = micro()
    trained = MambaFlow(cfg)
    for p in trained.parameters():
        p.data = p.data + 0.01
    save_weights(WeightStore.from_model(trained), tmp_path / "w.ssmf")
    fresh = MambaFlow(cfg.replace(seed=123))
    load_weights(tmp_path / "w.ssmf", expected=cfg).apply_to(fresh)
    for (k, a), (_, b) in zip(trained.state_dict().items(), fresh.state_dict().items()):
        np.testing.assert_array_equal(a.astype(np.float32), b.astype(np.float32), err_msg=k)


@pytest.mark.parametrize("cut", [3, 10, 50, -1])
def test_every_truncation_point_is_reported(tmp_path, cut):
    p = tmp_path / "w.ssmf"
    save_weights(WeightStore.from_model(MambaFlow(micro())), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:cut])
    with pytest.raises(TruncatedFileError):
        load_weights(p)


def test_unknown_version_and_trailing_bytes(tmp_path):
    p = tmp_path / "w.ssmf"
    save_weights(WeightStore.from_model(MambaFlow(micro())), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(UnsupportedVersionError):
        load_weights(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(WeightFormatError, match="trailing"):
        load_weights(p)


@given(
    st.integers(1, 256),
    st.sampled_from([4, 8]),
    st.integers(0, 12),
    st.booleans(),
    st.booleans(),
    st.sampled_from(["float32", "float64"]),
)
def test_config_text_roundtrip(dim, s, depth, aga, cross, prec):
    cfg = ModelConfig(dim=dim, downsample=s, depth=depth, use_aga=aga, use_cross=cross, precision=prec)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_config_text_rejects_unknown_keys_and_accepts_comments():
    assert ModelConfig.from_text("# comment\ndim = 32  # trailing\n").dim == 32
    with pytest.raises(ConfigError, match="unknown config key"):
        ModelConfig.from_text("dimension = 32\n")
    with pytest.raises(ConfigError):
        ModelConfig.from_text("downsample = 2\n")


# -- training ------------------------------------------------------------------------


def test_zero_steps_returns_initial_weights_and_empty_log(micro_data):
    r = train_toy(micro(precision="float32"), micro_data, steps=0)
    assert r.log == [] and r.final == r.initial
    assert r.store.equals(WeightStore.from_model(MambaFlow(micro(precision="float32"))))


def test_divergence_carries_the_last_good_weights(micro_data, monkeypatch):
    import ssmflow.train as tr

    calls = {"n": 0}
    real = tr.sequence_loss

    def flaky(*a, **kw):
        calls["n"] += 1
        out = real(*a, **kw)
        return out * np.nan if calls["n"] == 3 else out

    monkeypatch.setattr(tr, "sequence_loss", flaky)
    with pytest.raises(DivergenceError) as info:
        train_toy(micro(precision="float32"), micro_data, steps=5, eval_every=1, batch=2)
    assert info.value.step == 3
    assert all(np.isfinite(v).all() for v in info.value.last_good.params.values())


def test_clip_grad_norm_rescales_to_the_limit():
    grads = {Tensor([0.0]): np.array([3.0]), Tensor([0.0]): np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    total = np.sqrt(sum(float(g @ g) for g in grads.values()))
    assert total == pytest.approx(1.0, rel=1e-9)


def test_training_settings_reject_bad_values(micro_data):
    with pytest.raises(ValueError):
        train_toy(micro(), micro_data, settings=TrainSettings(batch=0))


def test_training_reduces_the_loss_on_a_small_problem(micro_data):
    with T.precision("float32"):
        r = train_toy(micro(precision="float32"), micro_data, steps=12, batch=4, lr=3e-3, eval_every=6)
    assert r.log[-1]["train_loss"] < r.log[0]["train_loss"] or r.final.epe < r.initial.epe
