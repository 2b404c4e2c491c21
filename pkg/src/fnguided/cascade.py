"""Three-stage coarse-to-fine inlier classifier.

A trunk of HA blocks lifts the ``(x1, y1, x2, y2)`` coordinates to ``C``
channels under the Bayesian ratio prior. Each refinement module reuses the
previous stage's features but swaps the prior for that stage's inlier
weights, so its normalization statistics come from the predicted inliers.
The final logits drive the weighted eight-point solve.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import geometry
from . import guidedloss as gl
from . import netblocks as nb

CHECKPOINT_MAGIC = b"FNCK"
CHECKPOINT_VERSION = 1
REFINE_PRIOR_FLOOR = 1e-3
MIN_POINTS = 16


class CascadeConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class CascadeConfig:
    trunk_depth: int = 6
    refine_depth: int = 2
    stage_guidance: list = field(default_factory=lambda: [3.0, 2.5, 2.0])
    eta1: float = 0.1
    eta2: float = 0.1
    eta3: float = 0.1
    eta3_warmup: int = 500
    channels: int = 32
    groups: int = nb.DEFAULT_GROUPS
    reduction: int = nb.DEFAULT_REDUCTION
    cascaded: bool = True
    loss_mode: str = "guided"

    def validate(self):
        if self.trunk_depth < 1 or self.refine_depth < 0:
            raise CascadeConfigError("trunk_depth must be >= 1 and refine_depth >= 0")
        if self.cascaded and self.refine_depth < 1:
            raise CascadeConfigError("a cascaded model needs refine_depth >= 1")
        g = [float(v) for v in self.stage_guidance]
        if self.cascaded:
            if len(g) != 3:
                raise CascadeConfigError(f"need 3 stage guidance values, got {len(g)}")
            if not g[0] > g[1] > g[2]:
                raise CascadeConfigError(f"stage guidance must strictly decrease, got {g}")
        elif len(g) < 1:
            raise CascadeConfigError("need at least one guidance value")
        if any(v <= 0 for v in g):
            raise CascadeConfigError("guidance values must be positive")
        if min(self.eta1, self.eta2, self.eta3) < 0:
            raise CascadeConfigError("loss weights must be nonnegative")
        if self.eta3_warmup < 0:
            raise CascadeConfigError("eta3_warmup must be nonnegative")
        if self.loss_mode not in ("guided", "ibce", "ce"):
            raise CascadeConfigError(f"unknown loss mode {self.loss_mode!r}")
        try:
            nb.check_channels(self.channels, self.groups, self.reduction)
        except nb.BlockConfigError as exc:
            raise CascadeConfigError(str(exc)) from exc
        return self

    @property
    def num_stages(self):
        return 3 if self.cascaded else 1

    @property
    def total_blocks(self):
        return self.trunk_depth + 2 * self.refine_depth

    def final_guidance(self):
        return float(self.stage_guidance[-1])

    def to_dict(self):
        d = asdict(self)
        d["stage_guidance"] = [float(v) for v in self.stage_guidance]
        return d

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise CascadeConfigError(f"unknown cascade config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def reference_preset(cls):
        return cls(trunk_depth=12, refine_depth=3, channels=128, eta3_warmup=20000)


@dataclass
class CascadeModel:
    config: CascadeConfig
    params: dict
    bn_states: dict
    seed: int = 0

    def block_names(self):
        return [k for k in self.bn_states]

    def num_parameter_tensors(self):
        return len(self.params)


@dataclass
class CascadeOutput:
    stage_logits: list
    final_weights: dc.Node
    e_vec: dc.Node
    E_hat: np.ndarray
    features: dc.Node = None

    @property
    def probabilities(self):
        return [dc.sigmoid(L) for L in self.stage_logits]


def expected_parameter_tensors(config):
    """Closed-form count of trainable tensors for ``config``."""
    heads = config.num_stages
    blocks = config.total_blocks
    return len(nb.BLOCK_PARAM_NAMES) * blocks + 2 + 2 * heads


def _stage_layout(config):
    """Block name prefixes for each stage, in execution order."""
    if config.cascaded:
        trunk = [f"trunk{i}" for i in range(config.trunk_depth)]
        r1 = [f"refine1_{i}" for i in range(config.refine_depth)]
        r2 = [f"refine2_{i}" for i in range(config.refine_depth)]
        return [trunk, r1, r2]
    return [[f"trunk{i}" for i in range(config.total_blocks)]]


def build_cascade(config, seed=0):
    """Initialize every parameter deterministically from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    C = config.channels
    params = {
        "lift_w": dc.parameter(rng.normal(scale=np.sqrt(2.0 / 4), size=(4, C)), name="lift_w"),
        "lift_b": dc.parameter(np.zeros(C), name="lift_b"),
    }
    bn_states = {}
    for s, stage in enumerate(_stage_layout(config)):
        for prefix in stage:
            block = nb.init_block_params(rng, C, config.groups, config.reduction, prefix=f"{prefix}.")
            for k, v in block.items():
                params[f"{prefix}.{k}"] = v
            bn_states[prefix] = nb.init_bn_state(C)
        params[f"head{s + 1}_w"] = dc.parameter(
            rng.normal(scale=1.0 / np.sqrt(C), size=(C, 1)), name=f"head{s + 1}_w")
        params[f"head{s + 1}_b"] = dc.parameter(np.zeros(1), name=f"head{s + 1}_b")
    return CascadeModel(config, params, bn_states, seed)


def _block_params(model, prefix):
    return {k: model.params[f"{prefix}.{k}"] for k in nb.BLOCK_PARAM_NAMES}


def _head(model, feats, stage):
    L = dc.linear(feats, model.params[f"head{stage}_w"], model.params[f"head{stage}_b"])
    return dc.reshape(L, L.shape[:-1])


def forward_cascade(model, coords, prior, training=True):
    """Run all stages on ``(N, 4)`` or ``(B, N, 4)`` normalized coordinates.

    ``prior`` holds the per-point Bayesian inlier posteriors, shape
    ``coords.shape[:-1]``. Running BN statistics are updated only when
    ``training`` is true.
    """
    config = model.config
    coords = np.asarray(coords, dtype=np.float64)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
        prior = np.asarray(prior, dtype=np.float64)[None]
    if coords.ndim != 3 or coords.shape[-1] != 4:
        raise CascadeConfigError(f"coordinates must be (B, N, 4), got {coords.shape}")
    if coords.shape[1] < MIN_POINTS:
        raise CascadeConfigError(f"need at least {MIN_POINTS} correspondences, got {coords.shape[1]}")
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != coords.shape[:-1]:
        raise CascadeConfigError(f"prior shape {prior.shape} does not match {coords.shape[:-1]}")

    f = dc.linear(dc.constant(coords), model.params["lift_w"], model.params["lift_b"])
    stage_prior = dc.constant(prior)
    logits = []
    for s, stage in enumerate(_stage_layout(config)):
        for prefix in stage:
            f = nb.ha_block_forward(f, stage_prior, _block_params(model, prefix),
                                    bn_state=model.bn_states[prefix], training=training,
                                    groups=config.groups, reduction=config.reduction)
        L = _head(model, f, s + 1)
        logits.append(L)
        # the next refinement module normalizes under this stage's inliers
        stage_prior = dc.add(nb.inlier_weight_head(L), REFINE_PRIOR_FLOOR)

    weights = nb.inlier_weight_head(logits[-1])
    e_vec = geometry.weighted_eight_point_node(coords, weights)
    E_hat = _project_batch(e_vec.value)
    if single:
        logits = [dc.reshape(L, L.shape[1:]) for L in logits]
        weights = dc.reshape(weights, weights.shape[1:])
        e_vec = dc.reshape(e_vec, (9,))
        E_hat = E_hat[0]
    return CascadeOutput(logits, weights, e_vec, E_hat, f)


def _project_batch(vecs):
    U, _, Vt = np.linalg.svd(vecs.reshape(-1, 3, 3))
    E = U @ (np.array([1.0, 1.0, 0.0])[:, None] * Vt)
    return E / np.linalg.norm(E, axis=(1, 2), keepdims=True)


def eta3_at(config, iteration):
    return config.eta3 if iteration >= config.eta3_warmup else 0.0


@dataclass
class LossBreakdown:
    total: dc.Node
    stage_losses: list
    regression: float
    weights: list
    states: list
    eta3: float


def total_loss(output, labels, gt_E, config, iteration, mode=None):
    """Combined classification and essential-regression objective.

    Stage losses use their own guidance and enter as ``l_final + eta1 l1 +
    eta2 l2``; the regression term is added with ``eta3`` once ``iteration``
    reaches the warmup. Pairs whose final weights have fewer than eight
    positive entries are left out of the regression term.
    """
    mode = mode or config.loss_mode
    labels = np.asarray(labels, dtype=bool)
    etas = [config.eta1, config.eta2] if config.cascaded else []
    guidance = [float(v) for v in config.stage_guidance][-len(output.stage_logits):]
    stage_losses, weights, states = [], [], []
    for L, n in zip(output.stage_logits, guidance):
        loss, w, st = gl.guided_loss_step(dc.sigmoid(L), labels, gl.FnGuidance(n), mode)
        stage_losses.append(loss)
        weights.append(w)
        states.append(st)
    total = stage_losses[-1]
    for eta, loss in zip(etas, stage_losses[:-1]):
        if eta:
            total = dc.add(total, dc.mul(loss, eta))
    eta3 = eta3_at(config, iteration)
    reg_value = float("nan")
    e = output.e_vec
    gt = np.asarray(gt_E, dtype=np.float64)
    if e.value.ndim == 1:
        e = dc.reshape(e, (1, 9))
        gt = gt.reshape(1, 9)
        valid = np.array([np.count_nonzero(output.final_weights.value > 0) >= 8])
    else:
        gt = gt.reshape(-1, 9)
        valid = np.count_nonzero(output.final_weights.value > 0, axis=-1) >= 8
    if valid.any():
        reg = _masked_regression(e, gt, valid)
        reg_value = float(reg.value)
        if eta3:
            total = dc.add(total, dc.mul(reg, eta3))
    return LossBreakdown(total, stage_losses, reg_value, weights, states, eta3)


def _masked_regression(e, gt, valid):
    minus = dc.reduce_sum(dc.power(dc.sub(e, gt), 2), axis=-1)
    plus = dc.reduce_sum(dc.power(dc.add(e, gt), 2), axis=-1)
    pick = (minus.value <= plus.value).astype(np.float64)
    per_item = dc.add(dc.mul(minus, pick), dc.mul(plus, 1.0 - pick))
    mask = valid.astype(np.float64) / valid.sum()
    return dc.reduce_sum(dc.mul(per_item, mask))


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model, iteration=0, extra_arrays=None, extra_header=None):
    """Write a JSON header followed by the raw little-endian float64 arrays."""
    arrays = [(f"param:{k}", v.value) for k, v in model.params.items()]
    for block, st in model.bn_states.items():
        arrays.append((f"bn:{block}:mean", st["mean"]))
        arrays.append((f"bn:{block}:var", st["var"]))
    for k, v in (extra_arrays or {}).items():
        arrays.append((f"extra:{k}", np.asarray(v, dtype=np.float64)))
    index, offset = [], 0
    for name, arr in arrays:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": int(model.seed),
        "iteration": int(iteration),
        "arrays": index,
        "extra": extra_header or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, iteration, extra_arrays, extra_header)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 8:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + hlen])
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    body = memoryview(data)[8 + hlen:]
    config = CascadeConfig.from_dict(header["config"]).validate()
    model = build_cascade(config, header["seed"])
    extra = {}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = item["offset"]
        if start + 8 * count > len(body):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(body[start:start + 8 * count], dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, name = item["name"].partition(":")
        if kind == "param":
            if name not in model.params or model.params[name].shape != shape:
                raise CheckpointError(f"parameter {name} does not match the config")
            model.params[name].value = arr
        elif kind == "bn":
            block, _, stat = name.rpartition(":")
            model.bn_states[block][stat] = arr
        else:
            extra[name] = arr
    return model, header["iteration"], extra, header.get("extra", {})
