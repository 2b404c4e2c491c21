import numpy as np
import pytest

from fnguided import cascade as cc
from fnguided import diffcore as dc
from fnguided import geometry
from fnguided import guidedloss as gl
from fnguided import synthgen as sg

from fdutil import param_loss_fn, total_loss_fd_error


def _small_config(**kw):
    base = dict(trunk_depth=2, refine_depth=1, channels=8, groups=2, reduction=2, eta3_warmup=0)
    base.update(kw)
    return cc.CascadeConfig(**base)


def _pair(seed, n=32, outliers=0.5):
    return sg.generate_scene_pair(sg.SceneConfig(num_correspondences=n, outlier_ratio=outliers,
                                                 noise_std_px=1.0, seed=seed))


def _probe(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def test_build_is_deterministic():
    a = cc.build_cascade(_small_config(), seed=3)
    b = cc.build_cascade(_small_config(), seed=3)
    c = cc.build_cascade(_small_config(), seed=4)
    assert all(np.array_equal(a.params[k].value, b.params[k].value) for k in a.params)
    assert not np.array_equal(a.params["trunk0.w1"].value, c.params["trunk0.w1"].value)


def test_block_counts():
    ref = cc.CascadeConfig.reference_preset()
    assert ref.total_blocks == 18
    desk = cc.CascadeConfig()
    assert desk.total_blocks == 10
    model = cc.build_cascade(desk, 0)
    assert len(model.block_names()) == 10
    assert model.num_parameter_tensors() == cc.expected_parameter_tensors(desk) == 108
    flat = cc.build_cascade(cc.CascadeConfig(cascaded=False, stage_guidance=[2.0]), 0)
    assert flat.num_parameter_tensors() == cc.expected_parameter_tensors(flat.config) == 104


@pytest.mark.parametrize("kw", [dict(channels=30), dict(stage_guidance=[2, 2.5, 3]),
                                dict(stage_guidance=[3, 2]), dict(eta1=-1.0),
                                dict(loss_mode="focal"), dict(stage_guidance=[3, 3, 2])])
def test_invalid_configs(kw):
    with pytest.raises(cc.CascadeConfigError):
        cc.CascadeConfig(**kw).validate()


def test_config_dict_round_trip():
    cfg = _small_config(stage_guidance=[4.0, 3.0, 1.0])
    assert cc.CascadeConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(cc.CascadeConfigError):
        cc.CascadeConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_forward_structure():
    model = cc.build_cascade(_small_config(), 1)
    pair = _pair(2)
    out = cc.forward_cascade(model, pair.correspondences, np.full(32, 0.5))
    assert len(out.stage_logits) == 3
    assert all(L.shape == (32,) for L in out.stage_logits)
    w = out.final_weights.value
    assert np.all((w >= 0) & (w < 1))
    assert out.E_hat.shape == (3, 3)
    assert abs(np.linalg.norm(out.E_hat) - 1) < 1e-12


def test_forward_rejects_small_pairs():
    model = cc.build_cascade(_small_config(), 1)
    with pytest.raises(cc.CascadeConfigError):
        cc.forward_cascade(model, np.zeros((10, 4)), np.full(10, 0.5))
    with pytest.raises(cc.CascadeConfigError):
        cc.forward_cascade(model, np.zeros((20, 4)), np.full(19, 0.5))


def test_batched_forward_matches_single():
    model = cc.build_cascade(_small_config(), 1)
    pairs = [_pair(s) for s in (5, 6)]
    coords = np.stack([p.correspondences for p in pairs])
    prior = np.random.default_rng(0).random((2, 32))
    batched = cc.forward_cascade(model, coords, prior, training=False)
    for i in range(2):
        single = cc.forward_cascade(model, coords[i], prior[i], training=False)
        np.testing.assert_allclose(batched.stage_logits[-1].value[i], single.stage_logits[-1].value,
                                   rtol=1e-11, atol=1e-12)


def test_constant_previous_weights_give_uniform_context():
    # a constant refinement prior shifts every attention logit equally
    from fnguided import netblocks as nb
    rng = np.random.default_rng(0)
    model = cc.build_cascade(_small_config(), 2)
    params = {k: model.params[f"refine1_0.{k}"] for k in nb.BLOCK_PARAM_NAMES}
    f = rng.normal(size=(32, 8))
    a = nb.ha_block_forward(f, np.full(32, 0.2), params, groups=2, reduction=2).value
    b = nb.ha_block_forward(f, np.full(32, 0.9), params, groups=2, reduction=2).value
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_permutation_equivariance():
    model = cc.build_cascade(_small_config(), 4)
    pair = _pair(9)
    prior = np.random.default_rng(1).random(32)
    perm = np.random.default_rng(2).permutation(32)
    a = cc.forward_cascade(model, pair.correspondences, prior, training=False)
    b = cc.forward_cascade(model, pair.correspondences[perm], prior[perm], training=False)
    for La, Lb in zip(a.stage_logits, b.stage_logits):
        np.testing.assert_allclose(La.value[perm], Lb.value, rtol=1e-10, atol=1e-12)


def test_stage3_loss_gradient_wrt_trunk():
    model = cc.build_cascade(_small_config(), 11)
    pair = _pair(12)
    prior = np.random.default_rng(3).uniform(0.1, 0.9, 32)
    for name in ("lift_w", "trunk0.w1", "trunk1.att_w"):
        fn = param_loss_fn(model, name, pair.correspondences, prior, pair.labels, pair.gt_E, 0,
                           stage3_only=True)
        assert dc.finite_difference_check(fn, model.params[name].value.copy()) < 1e-4


def test_eta3_schedule():
    cfg = _small_config(eta3_warmup=100)
    assert cc.eta3_at(cfg, 99) == 0.0
    assert cc.eta3_at(cfg, 100) == cfg.eta3


def test_loss_ignores_gt_before_warmup():
    cfg = _small_config(eta3_warmup=100)
    model = cc.build_cascade(cfg, 0)
    pair = _pair(3)
    out = cc.forward_cascade(model, pair.correspondences, np.full(32, 0.5))
    a = cc.total_loss(out, pair.labels, pair.gt_E, cfg, 10).total.value
    b = cc.total_loss(out, pair.labels, -np.eye(3), cfg, 10).total.value
    assert a == b
    c = cc.total_loss(out, pair.labels, pair.gt_E, cfg, 100)
    assert c.total.value == pytest.approx(a + cfg.eta3 * c.regression, rel=1e-12)


def test_loss_component_sum():
    cfg = _small_config()
    model = cc.build_cascade(cfg, 5)
    pair = _pair(7)
    out = cc.forward_cascade(model, pair.correspondences, np.full(32, 0.5))
    lb = cc.total_loss(out, pair.labels, pair.gt_E, cfg, 10)
    by_hand = []
    for L, n in zip(out.stage_logits, (3.0, 2.5, 2.0)):
        p = 1 / (1 + np.exp(-L.value))
        w = gl.solve_class_weights(gl.confusion_from_logits(p, pair.labels),
                                   gl.category_average_losses(p, pair.labels), n)
        lab = pair.labels
        by_hand.append(-(w.lam * np.log(p[lab]).mean() + w.mu * np.log(1 - p[~lab]).mean()))
    reg = geometry.essential_regression_loss(out.e_vec.value, pair.gt_E)
    expected = by_hand[2] + 0.1 * (by_hand[0] + by_hand[1] + reg)
    assert float(lb.total.value) == pytest.approx(expected, rel=1e-10)
    assert lb.regression == pytest.approx(reg, rel=1e-12)


def test_perfect_output_zero_loss():
    cfg = _small_config(eta1=0.0, eta2=0.0)
    pair = _pair(8)
    L = np.where(pair.labels, 40.0, -40.0)
    logits = [dc.parameter(L) for _ in range(3)]
    w = dc.tanh(dc.relu(logits[-1]))
    e = dc.constant(pair.gt_E.reshape(9))
    out = cc.CascadeOutput(logits, w, e, pair.gt_E)
    assert float(cc.total_loss(out, pair.labels, pair.gt_E, cfg, 10).total.value) < 1e-6


def test_loss_nonnegative():
    cfg = _small_config()
    model = cc.build_cascade(cfg, 6)
    for s in range(5):
        pair = _pair(40 + s)
        out = cc.forward_cascade(model, pair.correspondences, np.full(32, 0.5))
        assert cc.total_loss(out, pair.labels, pair.gt_E, cfg, 10).total.value >= 0


@pytest.mark.parametrize("seed", range(10))
def test_total_loss_gradient(seed):
    rng = np.random.default_rng(500 + seed)
    cfg = _small_config(eta3_warmup=0 if seed % 2 else 100)
    model = cc.build_cascade(cfg, seed)
    pairs = [_pair(1000 + 2 * seed + i, outliers=0.4) for i in range(2)]
    coords = np.stack([p.correspondences for p in pairs])
    labels = np.stack([p.labels for p in pairs])
    gt = np.stack([p.gt_E for p in pairs])
    prior = rng.uniform(0.1, 0.9, (2, 32))
    assert total_loss_fd_error(model, coords, prior, labels, gt, 10, rng) < 1e-4


def test_total_loss_gradient_per_tensor():
    # coordinate-wise check on tensors whose entries are all well above roundoff
    rng = np.random.default_rng(7)
    model = cc.build_cascade(_small_config(eta3_warmup=100), 3)
    pair = _pair(71, outliers=0.4)
    prior = rng.uniform(0.1, 0.9, 32)
    for name in ("head3_w", "head3_b", "lift_b"):
        fn = param_loss_fn(model, name, pair.correspondences, prior, pair.labels, pair.gt_E, 10)
        assert dc.finite_difference_check(fn, model.params[name].value.copy()) < 1e-4


def test_non_cascaded_uses_last_guidance():
    cfg = _small_config(cascaded=False, stage_guidance=[2.0])
    model = cc.build_cascade(cfg, 0)
    pair = _pair(3)
    out = cc.forward_cascade(model, pair.correspondences, np.full(32, 0.5))
    assert len(out.stage_logits) == 1
    lb = cc.total_loss(out, pair.labels, pair.gt_E, cfg, 0)
    p = 1 / (1 + np.exp(-out.stage_logits[0].value))
    ref = gl.solve_class_weights(gl.confusion_from_logits(p, pair.labels),
                                 gl.category_average_losses(p, pair.labels), 2.0)
    assert lb.weights[0].lam == pytest.approx(ref.lam, rel=1e-12)


def test_checkpoint_round_trip(tmp_path):
    cfg = _small_config()
    model = cc.build_cascade(cfg, 9)
    pair = _pair(1)
    cc.forward_cascade(model, pair.correspondences, np.full(32, 0.5), training=True)
    path = tmp_path / "m.bin"
    cc.save_checkpoint(path, model, 17, {"m:x": np.arange(3.0)}, {"note": "hi"})
    back, it, extra, header = cc.load_checkpoint(path)
    assert it == 17 and header == {"note": "hi"}
    np.testing.assert_array_equal(extra["m:x"], np.arange(3.0))
    assert back.config == cfg
    for k in model.params:
        assert np.array_equal(back.params[k].value, model.params[k].value)
    for k in model.bn_states:
        assert np.array_equal(back.bn_states[k]["mean"], model.bn_states[k]["mean"])
    a = cc.forward_cascade(model, pair.correspondences, np.full(32, 0.5), training=False)
    b = cc.forward_cascade(back, pair.correspondences, np.full(32, 0.5), training=False)
    assert np.array_equal(a.stage_logits[-1].value, b.stage_logits[-1].value)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    with pytest.raises(cc.CheckpointError):
        cc.load_checkpoint(bad)
    with pytest.raises(cc.CheckpointError):
        cc.load_checkpoint(tmp_path / "missing.bin")
    path = tmp_path / "m.bin"
    cc.save_checkpoint(path, cc.build_cascade(_small_config(), 0))
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(cc.CheckpointError):
        cc.load_checkpoint(path)
