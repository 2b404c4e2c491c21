"""Permutation-equivariant blocks over a set of correspondences.

Feature maps are ``(..., N, C)`` graph nodes: any leading axes are batch
axes (one pair each) and every statistic is taken over the ``N`` axis of a
single pair, so all blocks commute with permutations of the points.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import diffcore as dc
from . import kernels

CN_EPS = 1e-3
PRIOR_CLAMP = 1e-6
BN_MOMENTUM = 0.9
DEFAULT_GROUPS = 4
DEFAULT_REDUCTION = 4


class BlockConfigError(ValueError):
    pass


def weighted_standardize(f, w=None, eps=CN_EPS, return_stats=False):
    """``(f - u) / sqrt(var + eps)`` with mean and variance under weights ``w``.

    ``w`` has shape ``(..., N, 1)`` and sums to one over ``N``; ``None`` means
    uniform weights. Fused forward/backward from :mod:`fnguided.kernels`.
    With ``return_stats`` the per-pair ``(mean, var)`` arrays are returned too.
    """
    f = dc.as_node(f)
    shape = f.shape
    M = int(np.prod(shape[:-2], dtype=np.int64))
    x3 = np.ascontiguousarray(f.value.reshape(M, shape[-2], shape[-1]))
    parents = [f]
    w2 = None
    if w is not None:
        w = dc.as_node(w)
        w2 = np.ascontiguousarray(w.value.reshape(M, shape[-2]))
        parents.append(w)
    y, d, s = kernels.wstd_forward(x3, w2, eps)

    def fwd(*vals):
        xv = vals[0].reshape(M, shape[-2], shape[-1])
        wv = None if len(vals) == 1 else vals[1].reshape(M, shape[-2])
        return kernels.wstd_forward(xv, wv, eps)[0].reshape(shape)

    def backward(g, *vals):
        need_w = w is not None and w.requires_grad
        gx, gw = kernels.wstd_backward(
            np.ascontiguousarray(g.reshape(M, shape[-2], shape[-1])), x3, d, s, w2, need_w)
        gx = gx.reshape(shape)
        if w is None:
            return (gx,)
        return gx, (None if gw is None else gw.reshape(w.shape))

    out = dc.custom(y.reshape(shape), parents, fwd, backward, name="weighted_standardize")
    if not return_stats:
        return out
    mean = (x3[:, 0, :] - d[:, 0, :]).reshape(shape[:-2] + shape[-1:])
    var = (1.0 / (s * s) - eps).reshape(shape[:-2] + shape[-1:])
    return out, mean, var


def context_normalize(f, eps=CN_EPS):
    """Per-channel standardization over the points of each pair."""
    f = dc.as_node(f)
    if f.shape[-2] < 2:
        raise BlockConfigError("context normalization needs N >= 2")
    return weighted_standardize(f, None, eps)


def prior_logit(prior):
    """``log(p / (1 - p))`` with ``p`` clamped to ``[1e-6, 1 - 1e-6]``."""
    p = dc.clip(dc.as_node(prior), PRIOR_CLAMP, 1.0 - PRIOR_CLAMP)
    return dc.sub(dc.log(p), dc.log(dc.sub(1.0, p)))


def bacn_attention(f, prior, params):
    """Softmax over points of ``f @ att_w + logit(prior)``; shape ``(..., N, 1)``."""
    f = dc.as_node(f)
    prior = dc.as_node(prior)
    if prior.shape != f.shape[:-1]:
        raise BlockConfigError(f"prior shape {prior.shape} does not match {f.shape[:-1]}")
    logits = dc.add(dc.matmul(f, params["att_w"]),
                    dc.reshape(prior_logit(prior), prior.shape + (1,)))
    return dc.softmax(logits, axis=-2)


def bacn_forward(f, prior, params, eps=CN_EPS, return_attention=False):
    """Attention-weighted context normalization fused with an inlier prior.

    Mean and variance are taken under the attention weights; ``gamma`` and
    ``beta`` in ``params`` are applied when present.
    """
    f = dc.as_node(f)
    w = bacn_attention(f, prior, params)
    out = weighted_standardize(f, w, eps)
    if "gamma" in params:
        out = dc.add(dc.mul(out, params["gamma"]), params["beta"])
    return (out, w) if return_attention else out


def _normalize(f, state, training, eps, momentum):
    if training:
        normed, mean, var = weighted_standardize(f, None, eps, return_stats=True)
        if state is not None:
            axes = tuple(range(mean.ndim - 1))
            state["mean"] = momentum * state["mean"] + (1 - momentum) * mean.mean(axis=axes)
            state["var"] = momentum * state["var"] + (1 - momentum) * var.mean(axis=axes)
        return normed
    if state is None:
        raise BlockConfigError("evaluation-mode batch norm needs running statistics")
    return dc.mul(dc.sub(f, state["mean"]), 1.0 / np.sqrt(state["var"] + eps))


def batch_norm(f, params, state=None, training=True, eps=CN_EPS, momentum=BN_MOMENTUM):
    """Per-pair batch normalization with running statistics for evaluation."""
    normed = _normalize(dc.as_node(f), state, training, eps, momentum)
    return dc.add(dc.mul(normed, params["bn_gamma"]), params["bn_beta"])


def affine_relu(x, gamma, beta):
    """Fused ``relu(x * gamma + beta)`` with per-channel ``gamma``/``beta``."""
    x, gamma, beta = dc.as_node(x), dc.as_node(gamma), dc.as_node(beta)
    shape = x.shape
    C = shape[-1]

    def fwd(xv, gv, bv):
        return kernels.affine_relu_forward(xv.reshape(-1, C), gv, bv).reshape(shape)

    out = fwd(x.value, gamma.value, beta.value)

    def backward(g, xv, gv, bv):
        gx, ggamma, gbeta = kernels.affine_relu_backward(
            g.reshape(-1, C), xv.reshape(-1, C), out.reshape(-1, C), gv)
        return gx.reshape(shape), ggamma.reshape(gamma.shape), gbeta.reshape(beta.shape)

    return dc.custom(out, [x, gamma, beta], fwd, backward, name="affine_relu")


def batch_norm_relu(f, params, state=None, training=True, eps=CN_EPS, momentum=BN_MOMENTUM):
    """``relu(batch_norm(f))`` with the affine and activation fused."""
    normed = _normalize(dc.as_node(f), state, training, eps, momentum)
    return affine_relu(normed, params["bn_gamma"], params["bn_beta"])


@lru_cache(maxsize=None)
def _block_diag_scatter(groups, cin, cout):
    """0/1 matrix mapping flattened group weights to a block-diagonal matrix."""
    S = np.zeros((groups * cin * cout, groups * cin * groups * cout))
    C_in, C_out = groups * cin, groups * cout
    for g in range(groups):
        for i in range(cin):
            for j in range(cout):
                src = (g * cin + i) * cout + j
                dst = (g * cin + i) * C_out + (g * cout + j)
                S[src, dst] = 1.0
    S.setflags(write=False)
    return S


def group_linear(f, weight, bias):
    """Grouped pointwise linear map; ``weight`` has shape ``(groups, cin, cout)``."""
    weight = dc.as_node(weight)
    groups, cin, cout = weight.shape
    if f.shape[-1] != groups * cin:
        raise BlockConfigError(f"{f.shape[-1]} channels do not split into {groups} groups of {cin}")
    S = _block_diag_scatter(groups, cin, cout)
    flat = dc.reshape(weight, (1, groups * cin * cout))
    W = dc.reshape(dc.matmul(flat, S), (groups * cin, groups * cout))
    return dc.add(dc.matmul(f, W), bias)


def channel_attention_forward(f, params, groups=DEFAULT_GROUPS, reduction=DEFAULT_REDUCTION):
    """Per-point channel gating ``f * sigmoid(G2 relu(G1 f))``."""
    f = dc.as_node(f)
    C = f.shape[-1]
    if C % groups or C % reduction or (C // reduction) % groups or C // reduction < 1:
        raise BlockConfigError(
            f"channels {C} incompatible with groups={groups}, reduction={reduction}")
    names = ("ca_w1", "ca_b1", "ca_w2", "ca_b2")
    parents = [f] + [dc.as_node(params[k]) for k in names]
    if parents[1].shape[0] != groups:
        raise BlockConfigError(f"ca_w1 has {parents[1].shape[0]} groups, expected {groups}")
    shape = f.shape
    C = shape[-1]

    def run(fv, w1, b1, w2, b2):
        return kernels.channel_gate_forward(fv.reshape(-1, C), w1, b1, w2, b2)

    out, hidden, gate = run(*(p.value for p in parents))

    def fwd(*vals):
        return run(*vals)[0].reshape(shape)

    def backward(g, *vals):
        gh, gw1, gb1, gw2, gb2 = kernels.channel_gate_backward(
            g.reshape(-1, C), f.value.reshape(-1, C), parents[1].value, parents[3].value,
            hidden, gate)
        return gh.reshape(shape), gw1, gb1, gw2, gb2

    return dc.custom(out.reshape(shape), parents, fwd, backward, name="channel_attention")


def channel_attention_reference(f, params):
    """Composed-primitive version of :func:`channel_attention_forward`."""
    f = dc.as_node(f)
    hidden = dc.relu(group_linear(f, params["ca_w1"], params["ca_b1"]))
    gate = dc.sigmoid(group_linear(hidden, params["ca_w2"], params["ca_b2"]))
    return dc.mul(f, gate)


def ha_block_forward(f, prior, params, bn_state=None, training=True,
                     groups=DEFAULT_GROUPS, reduction=DEFAULT_REDUCTION):
    """Residual hybrid-attention block.

    ``f + CA(linear2(relu(BN(BACN(linear1(f), prior)))))``. BACN carries no
    affine of its own here: the per-pair BN right after it supplies the
    scale and shift.
    """
    f = dc.as_node(f)
    h = dc.matmul(f, params["w1"])
    h = bacn_forward(h, prior, params)
    h = batch_norm_relu(h, params, bn_state, training)
    h = dc.linear(h, params["w2"], params["b2"])
    h = channel_attention_forward(h, params, groups, reduction)
    return dc.add(f, h)


def inlier_weight_head(logits):
    """Eight-point weights ``tanh(relu(L))``."""
    return dc.tanh(dc.relu(dc.as_node(logits)))


def check_channels(channels, groups=DEFAULT_GROUPS, reduction=DEFAULT_REDUCTION):
    if channels < 1 or channels % groups or channels % reduction or \
            (channels // reduction) % groups:
        raise BlockConfigError(
            f"channels={channels} must be divisible by groups={groups} and "
            f"channels/reduction must be divisible by groups")


def init_block_params(rng, channels, groups=DEFAULT_GROUPS, reduction=DEFAULT_REDUCTION,
                      prefix=""):
    """He-style initialization of one HA block's parameters."""
    check_channels(channels, groups, reduction)
    C = channels
    hid = C // reduction
    cin1, cout1 = C // groups, hid // groups
    cin2, cout2 = hid // groups, C // groups

    def he(shape, fan_in):
        return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)

    values = {
        "w1": he((C, C), C),
        "att_w": rng.normal(scale=0.1 / np.sqrt(C), size=(C, 1)),
        "bn_gamma": np.ones(C),
        "bn_beta": np.zeros(C),
        "w2": he((C, C), C) * 0.5,
        "b2": np.zeros(C),
        "ca_w1": he((groups, cin1, cout1), cin1),
        "ca_b1": np.zeros(hid),
        "ca_w2": he((groups, cin2, cout2), cin2),
        "ca_b2": np.zeros(C),
    }
    return {k: dc.parameter(v, name=f"{prefix}{k}") for k, v in values.items()}


def init_bn_state(channels):
    return {"mean": np.zeros(channels), "var": np.ones(channels)}


BLOCK_PARAM_NAMES = ("w1", "att_w", "bn_gamma", "bn_beta", "w2", "b2",
                     "ca_w1", "ca_b1", "ca_w2", "ca_b2")
