"""Adam training loop for the cascade.

Every iteration draws its batch from a generator seeded by
``(seed, iteration)``, so a run resumed from a checkpoint replays exactly
the batches the uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cascade as cc
from . import diffcore as dc
from . import prior as pr
from . import synthgen as sg
from ._alloc import tune_allocator
from .evalharness import compute_classification_metrics

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    total_iterations: int = 5000
    eta3_warmup_iterations: int = 500
    seed: int = 0
    data_path: str = ""
    prior_path: str = ""
    val_fraction: float = 0.1
    val_every: int = 50
    val_max_pairs: int = 128
    grad_clip: float = 10.0
    checkpoint_every: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if self.eta3_warmup_iterations < 0:
            raise ConfigError("eta3_warmup_iterations must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")
        return self


def _coerce(value, kind, key):
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is list:
            return [float(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def _field_types(cls):
    kinds = {"int": int, "float": float, "str": str, "bool": bool, "list": list}
    return {f.name: kinds[f.type] for f in fields(cls)}


def parse_config_text(text):
    """Split ``key = value`` lines into ``(TrainConfig, CascadeConfig)``.

    Blank lines and ``#`` comments are ignored; unknown keys are errors.
    """
    train_types = _field_types(TrainConfig)
    casc_types = _field_types(cc.CascadeConfig)
    train_kw, casc_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in train_types:
            train_kw[key] = _coerce(value, train_types[key], key)
        elif key in casc_types:
            casc_kw[key] = _coerce(value, casc_types[key], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    tcfg = TrainConfig(**train_kw).validate()
    if "eta3_warmup" not in casc_kw:
        casc_kw["eta3_warmup"] = tcfg.eta3_warmup_iterations
    try:
        ccfg = cc.CascadeConfig(**casc_kw).validate()
    except cc.CascadeConfigError as exc:
        raise ConfigError(str(exc)) from exc
    return tcfg, ccfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


# --- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, gradients, state, lr):
    """Bias-corrected Adam update of ``params`` (name -> Node or array) in place.

    Parameters without a gradient are treated as having a zero gradient.
    Raises :class:`fnguided.diffcore.NonFiniteError` on NaN/Inf gradients.
    """
    for name, g in gradients.items():
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        value = p.value if isinstance(p, dc.Node) else p
        g = gradients.get(name)
        if g is None:
            g = np.zeros_like(value)
        elif np.shape(g) != value.shape:
            raise dc.ShapeMismatchError(f"gradient for {name} has shape {np.shape(g)}, expected {value.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if isinstance(p, dc.Node):
            p.value = value - update
        else:
            value -= update
    return params, state


def clip_gradients(gradients, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in gradients.values()))
    if norm > max_norm:
        scale = max_norm / norm
        gradients = {k: g * scale for k, g in gradients.items()}
    return gradients, norm


# --- data -----------------------------------------------------------------------

@dataclass
class PreparedPair:
    coords: np.ndarray
    labels: np.ndarray
    prior: np.ndarray
    gt_E: np.ndarray

    @property
    def n(self):
        return len(self.labels)


def prepare_pairs(pairs, prior_model, min_points=cc.MIN_POINTS):
    """Attach Bayesian posteriors; drops pairs that are too small or single-class."""
    out, dropped = [], 0
    for pair in pairs:
        n_pos = int(pair.labels.sum())
        if pair.n < min_points or n_pos == 0 or n_pos == pair.n:
            dropped += 1
            continue
        post, _ = pr.pair_posteriors(pair.lowe_ratios, prior_model)
        out.append(PreparedPair(pair.correspondences, pair.labels.astype(bool), post, pair.gt_E))
    return out, dropped


def split_pairs(pairs, val_fraction):
    """Last ``ceil(val_fraction * n)`` pairs form the validation split."""
    n_val = int(math.ceil(val_fraction * len(pairs))) if val_fraction > 0 else 0
    if n_val >= len(pairs) and len(pairs) > 0:
        n_val = len(pairs) - 1
    return pairs[:len(pairs) - n_val], pairs[len(pairs) - n_val:]


def group_by_size(items):
    """Consecutive-order groups of pairs sharing one ``N`` (stackable batches)."""
    groups = {}
    for item in items:
        groups.setdefault(item.n, []).append(item)
    return list(groups.values())


def _stack(group):
    return (np.stack([p.coords for p in group]), np.stack([p.labels for p in group]),
            np.stack([p.prior for p in group]), np.stack([p.gt_E for p in group]))


def batch_indices(seed, iteration, n_train, batch_size):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration)]))
    return rng.choice(n_train, size=batch_size, replace=n_train < batch_size)


# --- loop -----------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    loss_cls: float
    loss_reg: float
    eta3: float
    lambdas: list
    grad_norm: float


def training_step(model, batch, iteration, config, opt_state, update=True):
    """Forward, loss, backward and (optionally) one Adam update on ``batch``."""
    ccfg = model.config
    B = len(batch)
    total = None
    cls_value, reg_sum, reg_count, eta3 = 0.0, 0.0, 0, 0.0
    lam_sums = np.zeros(ccfg.num_stages)
    for group in group_by_size(batch):
        coords, labels, prior, gt_E = _stack(group)
        out = cc.forward_cascade(model, coords, prior, training=True)
        lb = cc.total_loss(out, labels, gt_E, ccfg, iteration)
        share = len(group) / B
        part = dc.mul(lb.total, share) if share != 1.0 else lb.total
        total = part if total is None else dc.add(total, part)
        eta3 = lb.eta3
        cls = lb.stage_losses[-1].value + sum(
            e * l.value for e, l in zip([ccfg.eta1, ccfg.eta2] if ccfg.cascaded else [],
                                        lb.stage_losses[:-1]))
        cls_value += share * float(cls)
        if math.isfinite(lb.regression):
            reg_sum += lb.regression * len(group)
            reg_count += len(group)
        for s, ws in enumerate(lb.weights):
            lam_sums[s] += sum(w.lam for w in ws)
    grads = dc.backpropagate(total)
    names = {id(p): k for k, p in model.params.items()}
    named = {names[id(p)]: g for p, g in grads.items() if id(p) in names}
    named, norm = clip_gradients(named, config.grad_clip)
    if update:
        adam_step(model.params, named, opt_state, config.learning_rate)
    return StepResult(float(total.value), cls_value,
                      reg_sum / reg_count if reg_count else float("nan"),
                      eta3, list(lam_sums / B), norm)


def validate(model, pairs, batch_size=16):
    """Mean per-pair precision, recall, F1 and F2 of the final stage (eval mode)."""
    stats = []
    for group in group_by_size(pairs):
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            coords, labels, prior, _ = _stack(chunk)
            out = cc.forward_cascade(model, coords, prior, training=False)
            probs = 0.5 + 0.5 * np.tanh(0.5 * out.stage_logits[-1].value)
            for p, lab in zip(probs, labels):
                stats.append(compute_classification_metrics(p, lab))
    if not stats:
        nan = float("nan")
        return {"precision": nan, "recall": nan, "f1": nan, "f2": nan}
    P, R, F1, F2 = np.mean(stats, axis=0)
    return {"precision": float(P), "recall": float(R), "f1": float(F1), "f2": float(F2)}


@dataclass
class TrainResult:
    model: cc.CascadeModel
    records: list
    checkpoint_path: str = None
    log_path: str = None
    elapsed: float = 0.0
    final_validation: dict = None
    dropped_pairs: int = 0


def _optimizer_arrays(state):
    arrays = {}
    for k in state.m:
        arrays[f"m:{k}"] = state.m[k]
        arrays[f"v:{k}"] = state.v[k]
    return arrays


def _optimizer_from_arrays(arrays, step):
    state = OptimizerState(step=step)
    for key, arr in arrays.items():
        kind, _, name = key.partition(":")
        if kind == "m":
            state.m[name] = arr.copy()
        elif kind == "v":
            state.v[name] = arr.copy()
    return state


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def load_training_data(config, pairs=None, prior_model=None):
    if pairs is None:
        if not config.data_path:
            raise ConfigError("no dataset given")
        pairs, _ = sg.read_dataset(config.data_path)
    train_raw, val_raw = split_pairs(list(pairs), config.val_fraction)
    if prior_model is None:
        if config.prior_path:
            prior_model = pr.RatioDensityModel.load(config.prior_path)
        else:
            ratios = np.concatenate([p.lowe_ratios for p in train_raw])
            labels = np.concatenate([p.labels for p in train_raw])
            prior_model = pr.fit_ratio_densities(ratios, labels)
    train_set, d1 = prepare_pairs(train_raw, prior_model)
    val_set, d2 = prepare_pairs(val_raw, prior_model)
    if not train_set:
        raise ConfigError("no usable training pairs")
    if config.val_max_pairs:
        val_set = val_set[:config.val_max_pairs]
    return train_set, val_set, d1 + d2, prior_model


def train(config, cascade_config, pairs=None, prior_model=None, out_dir=None,
          resume=None, progress=None):
    """Run the optimization loop and return a :class:`TrainResult`.

    ``pairs``/``prior_model`` override the paths in ``config``. With
    ``out_dir`` the JSONL log and final checkpoint are written there; with
    ``resume`` training continues from that checkpoint's iteration.
    """
    config.validate()
    tune_allocator()
    cascade_config.validate()
    train_set, val_set, dropped, prior_model = load_training_data(config, pairs, prior_model)
    start = 0
    if resume is not None:
        model, last_it, extra, header = cc.load_checkpoint(resume)
        opt_state = _optimizer_from_arrays(extra, int(header.get("adam_step", 0)))
        start = last_it + 1
    else:
        model = cc.build_cascade(cascade_config, config.seed)
        opt_state = OptimizerState()

    log_fh = ckpt_path = log_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = str(out / "train_log.jsonl")
        ckpt_path = str(out / "checkpoint.bin")
        log_fh = open(log_path, "a" if resume is not None else "w")

    def checkpoint(iteration):
        if ckpt_path is not None:
            cc.save_checkpoint(ckpt_path, model, iteration, _optimizer_arrays(opt_state),
                               {"adam_step": opt_state.step, "train_config": config.__dict__,
                                "prior": json.loads(prior_model.to_json())})

    records = []
    t0 = time.perf_counter()
    final_val = None
    last = start - 1
    try:
        for it in range(start, config.total_iterations):
            idx = batch_indices(config.seed, it, len(train_set), config.batch_size)
            step = training_step(model, [train_set[i] for i in idx], it, config, opt_state)
            rec = {"iteration": it, "loss": step.loss, "loss_cls": step.loss_cls,
                   "loss_reg": _json_float(step.loss_reg), "eta3": step.eta3,
                   "grad_norm": step.grad_norm}
            for s in range(3):
                lam = step.lambdas[s] if s < len(step.lambdas) else None
                if not model.config.cascaded:
                    lam = step.lambdas[0] if s == 2 else None
                rec[f"lambda_stage{s + 1}"] = lam
            val = None
            if val_set and ((it + 1) % config.val_every == 0 or it == config.total_iterations - 1):
                val = validate(model, val_set, config.batch_size)
                final_val = val
            rec["val_precision"] = val["precision"] if val else None
            rec["val_recall"] = val["recall"] if val else None
            rec["val_f2"] = val["f2"] if val else None
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress is not None:
                progress(rec)
            last = it
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                checkpoint(it)
        checkpoint(last)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, records, ckpt_path, log_path, time.perf_counter() - t0,
                       final_val, dropped)
