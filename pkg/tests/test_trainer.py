import json

import numpy as np
import pytest

from fnguided import cascade as cc
from fnguided import diffcore as dc
from fnguided import prior as pr
from fnguided import synthgen as sg
from fnguided import trainer as tr


@pytest.fixture(scope="module")
def toy_pairs():
    cfg = sg.SceneConfig(num_correspondences=48, outlier_ratio=0.5, noise_std_px=1.0, seed=77)
    return sg.generate_dataset(cfg, 30, (0.4, 0.7))


@pytest.fixture(scope="module")
def toy_prior(toy_pairs):
    ratios = np.concatenate([p.lowe_ratios for p in toy_pairs])
    labels = np.concatenate([p.labels for p in toy_pairs])
    return pr.fit_ratio_densities(ratios, labels, bins=20)


def _small(**kw):
    base = dict(trunk_depth=2, refine_depth=1, channels=8, groups=2, reduction=2)
    base.update(kw)
    return cc.CascadeConfig(**base)


def _tcfg(**kw):
    base = dict(total_iterations=20, batch_size=4, val_fraction=0.2, val_every=10,
                eta3_warmup_iterations=10, learning_rate=3e-3, seed=1)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    state = tr.OptimizerState()
    tr.adam_step(params, {"w": np.zeros(2)}, state, 1e-3)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_size():
    params = {"w": np.array([0.5]), "b": dc.parameter(np.array([0.0, 0.0]))}
    tr.adam_step(params, {"w": np.array([1.0]), "b": np.array([-3.0, 1e-3])},
                 tr.OptimizerState(), 1e-3)
    assert params["w"][0] == pytest.approx(0.5 - 1e-3, rel=1e-6)
    np.testing.assert_allclose(params["b"].value, [1e-3, -1e-3], rtol=1e-4)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        params = {"w": rng.normal(size=(3, 4))}
        state = tr.OptimizerState()
        for _ in range(5):
            tr.adam_step(params, {"w": rng.normal(size=(3, 4))}, state, 1e-2)
        return params["w"]
    assert np.array_equal(run(), run())


def test_adam_rejects_non_finite():
    params = {"w": np.ones(2)}
    with pytest.raises(dc.NonFiniteError):
        tr.adam_step(params, {"w": np.array([np.nan, 0.0])}, tr.OptimizerState(), 1e-3)
    np.testing.assert_array_equal(params["w"], [1.0, 1.0])


def test_clip_gradients():
    g, norm = tr.clip_gradients({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert norm == pytest.approx(5.0)
    assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)


def test_parse_config():
    text = """
    # comment
    learning_rate = 5e-4
    total_iterations = 12
    stage_guidance = [3, 2.5, 2]
    cascaded = true
    eta3_warmup_iterations = 4
    """
    tcfg, ccfg = tr.parse_config_text(text)
    assert tcfg.learning_rate == 5e-4 and tcfg.total_iterations == 12
    assert ccfg.stage_guidance == [3.0, 2.5, 2.0]
    assert ccfg.eta3_warmup == 4


@pytest.mark.parametrize("text", ["bogus = 1", "learning_rate", "learning_rate = -1",
                                  "batch_size = x", "stage_guidance = [3, 1, 2]"])
def test_parse_config_errors(text):
    with pytest.raises(tr.ConfigError):
        tr.parse_config_text(text)


def test_load_config_missing(tmp_path):
    with pytest.raises(tr.ConfigError):
        tr.load_config(tmp_path / "nope.cfg")


def test_batch_indices_deterministic():
    a = tr.batch_indices(3, 10, 100, 8)
    assert np.array_equal(a, tr.batch_indices(3, 10, 100, 8))
    assert not np.array_equal(a, tr.batch_indices(3, 11, 100, 8))


def test_training_reduces_loss(toy_pairs, toy_prior):
    tcfg = _tcfg(total_iterations=200, eta3_warmup_iterations=1000, val_every=100)
    res = tr.train(tcfg, _small(eta3_warmup=1000), pairs=toy_pairs, prior_model=toy_prior)
    losses = np.array([r["loss"] for r in res.records])
    assert losses[-20:].mean() < losses[:20].mean()
    lam = np.array([r["lambda_stage3"] for r in res.records])
    assert np.all((lam > 0) & (lam < 1))
    assert np.ptp(lam) > 0
    assert res.final_validation["f2"] > 0


def test_ibce_logs_constant_half(toy_pairs, toy_prior):
    res = tr.train(_tcfg(total_iterations=5), _small(loss_mode="ibce"),
                   pairs=toy_pairs, prior_model=toy_prior)
    for r in res.records:
        assert r["lambda_stage1"] == r["lambda_stage2"] == r["lambda_stage3"] == 0.5


def test_log_fields(tmp_path, toy_pairs, toy_prior):
    res = tr.train(_tcfg(total_iterations=12), _small(), pairs=toy_pairs,
                   prior_model=toy_prior, out_dir=tmp_path)
    lines = [json.loads(s) for s in open(res.log_path)]
    assert [r["iteration"] for r in lines] == list(range(12))
    keys = {"iteration", "loss", "loss_cls", "loss_reg", "eta3", "grad_norm", "lambda_stage1",
            "lambda_stage2", "lambda_stage3", "val_precision", "val_recall", "val_f2"}
    assert keys <= set(lines[0])
    assert lines[9]["val_f2"] is not None and lines[8]["val_f2"] is None


def test_eta3_activation_jump(toy_pairs, toy_prior):
    # the objective differs across the warmup boundary by exactly eta3 * l_reg
    tcfg = _tcfg()
    ccfg = _small(eta3_warmup=10)
    train_set, _, _, _ = tr.load_training_data(tcfg, toy_pairs, toy_prior)
    model = cc.build_cascade(ccfg, 0)
    batch = train_set[:4]
    before = tr.training_step(model, batch, 9, tcfg, tr.OptimizerState(), update=False)
    after = tr.training_step(model, batch, 10, tcfg, tr.OptimizerState(), update=False)
    assert before.eta3 == 0 and after.eta3 == ccfg.eta3
    assert before.loss_cls == after.loss_cls
    assert after.loss - before.loss == pytest.approx(ccfg.eta3 * after.loss_reg, rel=1e-9)


def test_fixed_seed_reproducible(tmp_path, toy_pairs, toy_prior):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        tr.train(_tcfg(), _small(), pairs=toy_pairs, prior_model=toy_prior, out_dir=d)
        outs.append(((d / "train_log.jsonl").read_bytes(), (d / "checkpoint.bin").read_bytes()))
    assert outs[0] == outs[1]


def test_resume_is_bit_identical(tmp_path, toy_pairs, toy_prior):
    full = tmp_path / "full"
    tr.train(_tcfg(total_iterations=20), _small(), pairs=toy_pairs, prior_model=toy_prior,
             out_dir=full)
    part = tmp_path / "part"
    tr.train(_tcfg(total_iterations=12), _small(), pairs=toy_pairs, prior_model=toy_prior,
             out_dir=part)
    tr.train(_tcfg(total_iterations=20), _small(), pairs=toy_pairs, prior_model=toy_prior,
             out_dir=part, resume=str(part / "checkpoint.bin"))
    assert (full / "checkpoint.bin").read_bytes() == (part / "checkpoint.bin").read_bytes()
    a = [json.loads(s) for s in open(full / "train_log.jsonl")]
    b = [json.loads(s) for s in open(part / "train_log.jsonl")]
    assert len(a) == len(b) == 20
    # the shortened run also validates at its own last iteration (11)
    for ra, rb in zip(a, b):
        if ra["iteration"] == 11:
            ra = {k: v for k, v in ra.items() if not k.startswith("val_")}
            rb = {k: v for k, v in rb.items() if not k.startswith("val_")}
        assert ra == rb


def test_prepare_drops_tiny_and_single_class(toy_prior):
    cfg = sg.SceneConfig(num_correspondences=48, outlier_ratio=0.5, seed=3)
    good = sg.generate_scene_pair(cfg)
    clean = sg.generate_scene_pair(sg.SceneConfig(num_correspondences=48, outlier_ratio=0.0, seed=4))
    kept, dropped = tr.prepare_pairs([good, clean], toy_prior)
    assert len(kept) == 1 and dropped == 1
    assert np.all((kept[0].prior > 0) & (kept[0].prior < 1))


def test_train_config_validation():
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig(val_fraction=1.0).validate()
    with pytest.raises(tr.ConfigError):
        tr.train(tr.TrainConfig(total_iterations=1), _small())
