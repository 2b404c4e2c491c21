"""Fn-measure guided class weighting for binary cross-entropy.

After each forward pass the batch is split into TP/TN/FP/FN at threshold
0.5. With ``X`` false negatives and ``Y`` false positives, the IB-CE loss
changes with ``X`` and ``Y`` at rates ``lambda/N_pos (l_FN - l_TP)`` and
``mu/N_neg (l_FP - l_TN)``. Choosing ``lambda/mu`` so that these rates are
proportional to the unit-step differences of ``Fn(X, Y)`` makes every
change of the loss in ``(X, Y)`` space point against the change of ``Fn``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

FALLBACK_LOSS = -math.log(0.5)
GAP_EPS = 1e-9
THRESHOLD = 0.5


class GuidedLossError(ValueError):
    pass


@dataclass(frozen=True)
class FnGuidance:
    n: float = 2.0

    def __post_init__(self):
        if not self.n > 0:
            raise ValueError(f"guidance n must be positive, got {self.n}")


@dataclass(frozen=True)
class ConfusionState:
    n_pos: int
    n_neg: int
    x: int  # false negatives
    y: int  # false positives

    def __post_init__(self):
        if not (0 <= self.x <= self.n_pos and 0 <= self.y <= self.n_neg):
            raise ValueError(f"invalid confusion state {self}")

    @property
    def n_tp(self):
        return self.n_pos - self.x

    @property
    def n_tn(self):
        return self.n_neg - self.y


@dataclass(frozen=True)
class CategoryLosses:
    l_tp: float
    l_tn: float
    l_fp: float
    l_fn: float
    empty: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ClassWeights:
    lam: float
    mu: float
    fallback: bool = False

    @classmethod
    def balanced(cls, fallback=False):
        return cls(0.5, 0.5, fallback)


@dataclass(frozen=True)
class FnPartials:
    dx: float
    dy: float
    degenerate_x: bool = False
    degenerate_y: bool = False


def _guidance_n(guidance):
    return guidance.n if isinstance(guidance, FnGuidance) else float(guidance)


def precision_recall(state):
    tp = state.n_tp
    if tp <= 0:
        return 0.0, 0.0
    return tp / (tp + state.y), tp / state.n_pos


def fn_from_pr(p, r, n):
    n2 = n * n
    denom = n2 * p + r
    if denom <= 0:
        return 0.0
    return (1.0 + n2) * p * r / denom


def fn_measure(state, guidance):
    """``(1 + n^2) P R / (n^2 P + R)``; 0 when there are no true positives."""
    p, r = precision_recall(state)
    return fn_from_pr(p, r, _guidance_n(guidance))


def _as_prob_array(probabilities):
    p = probabilities.value if isinstance(probabilities, dc.Node) else probabilities
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise GuidedLossError("probabilities must lie in [0, 1]")
    return p


def confusion_from_logits(probabilities, labels):
    """Confusion counts with ``positive <=> probability > 0.5``."""
    p = _as_prob_array(probabilities).reshape(-1)
    lab = np.asarray(labels, dtype=bool).reshape(-1)
    if p.shape != lab.shape:
        raise GuidedLossError("probabilities and labels differ in length")
    pred = p > THRESHOLD
    n_pos = int(lab.sum())
    return ConfusionState(n_pos=n_pos, n_neg=int(lab.size - n_pos),
                          x=int(np.sum(lab & ~pred)), y=int(np.sum(~lab & pred)))


def category_average_losses(probabilities, labels):
    """Mean cross-entropy of each confusion category (fallback ``-log 0.5``)."""
    p = _as_prob_array(probabilities).reshape(-1)
    lab = np.asarray(labels, dtype=bool).reshape(-1)
    pred = p > THRESHOLD
    pos_loss = -np.log(np.maximum(p, dc.LOG_FLOOR))
    neg_loss = -np.log(np.maximum(1.0 - p, dc.LOG_FLOOR))
    cats = {
        "tp": (lab & pred, pos_loss),
        "fn": (lab & ~pred, pos_loss),
        "tn": (~lab & ~pred, neg_loss),
        "fp": (~lab & pred, neg_loss),
    }
    values, empty = {}, {}
    for key, (mask, loss) in cats.items():
        empty[key] = not mask.any()
        values[key] = FALLBACK_LOSS if empty[key] else float(loss[mask].mean())
    return CategoryLosses(values["tp"], values["tn"], values["fp"], values["fn"], empty)


def numerical_fn_partials(state, guidance):
    """Unit-step forward differences ``F(X+1, Y) - F(X, Y)`` and ``F(X, Y+1) - F(X, Y)``."""
    base = fn_measure(state, guidance)
    deg_x = state.x + 1 > state.n_pos
    deg_y = state.y + 1 > state.n_neg
    dx = 0.0 if deg_x else fn_measure(
        ConfusionState(state.n_pos, state.n_neg, state.x + 1, state.y), guidance) - base
    dy = 0.0 if deg_y else fn_measure(
        ConfusionState(state.n_pos, state.n_neg, state.x, state.y + 1), guidance) - base
    return FnPartials(dx, dy, deg_x, deg_y)


def analytic_fn_partials(state, guidance):
    """Chain-rule partials of ``Fn`` through precision and recall."""
    tp = state.n_tp
    if tp <= 0:
        raise GuidedLossError("Fn partials undefined without true positives")
    n2 = _guidance_n(guidance) ** 2
    p, r = precision_recall(state)
    denom = (n2 * p + r) ** 2
    dF_dP = (1.0 + n2) * r * r / denom
    dF_dR = n2 * (1.0 + n2) * p * p / denom
    dP_dX = -state.y / (tp + state.y) ** 2
    dP_dY = -tp / (tp + state.y) ** 2
    dR_dX = -1.0 / state.n_pos
    dR_dY = 0.0
    return FnPartials(dF_dP * dP_dX + dF_dR * dR_dX, dF_dP * dP_dY + dF_dR * dR_dY)


def loss_partials(state, losses, weights):
    """``(d loss/dX, d loss/dY)`` of the category-decomposed IB-CE loss."""
    return (weights.lam / state.n_pos * (losses.l_fn - losses.l_tp),
            weights.mu / state.n_neg * (losses.l_fp - losses.l_tn))


def solve_class_weights(state, losses, guidance):
    """``(lambda, mu)`` with ``lambda + mu = 1`` matching the loss and Fn partial ratios."""
    if state.n_pos == 0 or state.n_neg == 0:
        return ClassWeights.balanced(fallback=True)
    if state.x == 0 and state.y == 0:
        # nothing misclassified, so there is no trade-off to steer
        return ClassWeights.balanced(fallback=True)
    parts = numerical_fn_partials(state, guidance)
    gap_pos = losses.l_fn - losses.l_tp
    gap_neg = losses.l_fp - losses.l_tn
    if (parts.dx == 0.0 or parts.dy == 0.0 or parts.degenerate_x or parts.degenerate_y
            or gap_pos <= GAP_EPS or gap_neg <= GAP_EPS or state.n_tp == 0):
        return ClassWeights.balanced(fallback=True)
    k = (parts.dx / parts.dy) * (state.n_pos / state.n_neg) * (gap_neg / gap_pos)
    if not (math.isfinite(k) and k > 0):
        return ClassWeights.balanced(fallback=True)
    # form the smaller weight directly so the ratio keeps full precision
    if k >= 1.0:
        mu = 1.0 / (1.0 + k)
        return ClassWeights(1.0 - mu, mu)
    lam = k / (1.0 + k)
    return ClassWeights(lam, 1.0 - lam)


def _class_coefficients(labels, weights):
    """Per-sample coefficients so that the loss is ``-sum(cp log y + cn log(1-y))``."""
    lab = np.asarray(labels, dtype=bool)
    lab2 = lab.reshape(-1, lab.shape[-1])
    n_pos = lab2.sum(axis=1)
    n_neg = lab2.shape[1] - n_pos
    if np.any(n_pos == 0) or np.any(n_neg == 0):
        raise GuidedLossError("each batch element needs both classes")
    if isinstance(weights, ClassWeights):
        weights = [weights] * lab2.shape[0]
    lam = np.array([w.lam for w in weights], dtype=np.float64)
    mu = np.array([w.mu for w in weights], dtype=np.float64)
    cp = lab2 * (lam / n_pos)[:, None]
    cn = ~lab2 * (mu / n_neg)[:, None]
    return cp.reshape(lab.shape), cn.reshape(lab.shape)


def weighted_ib_ce_loss(probabilities, labels, weights):
    """``-(lambda mean_pos log y + mu mean_neg log(1 - y))`` as a graph node.

    ``probabilities`` may be ``(N,)`` with one :class:`ClassWeights` or
    ``(B, N)`` with a list of them; the batch loss is the per-pair mean.
    """
    y = dc.as_node(probabilities)
    cp, cn = _class_coefficients(labels, weights)
    scale = 1.0 / (cp.shape[0] if cp.ndim == 2 else 1)
    pos = dc.mul(dc.log(y), cp * scale)
    neg = dc.mul(dc.log(dc.sub(1.0, y)), cn * scale)
    return dc.neg(dc.reduce_sum(dc.add(pos, neg)))


def _rows(arr):
    arr = np.asarray(arr)
    return arr.reshape(-1, arr.shape[-1])


def guided_weights(probabilities, labels, guidance, mode="guided"):
    """Per-pair class weights and confusion states for a ``(B, N)`` batch.

    ``mode`` is ``"guided"`` (solved weights), ``"ibce"`` (fixed 0.5/0.5) or
    ``"ce"`` (``lambda = N_pos / N``, i.e. plain mean cross-entropy).
    """
    probs = _rows(_as_prob_array(probabilities))
    labs = _rows(np.asarray(labels, dtype=bool))
    weights, states = [], []
    for p, lab in zip(probs, labs):
        state = confusion_from_logits(p, lab)
        if mode == "guided":
            w = solve_class_weights(state, category_average_losses(p, lab), guidance)
        elif mode == "ibce":
            w = ClassWeights.balanced()
        elif mode == "ce":
            lam = state.n_pos / (state.n_pos + state.n_neg)
            w = ClassWeights(lam, 1.0 - lam)
        else:
            raise ValueError(f"unknown loss mode {mode!r}")
        weights.append(w)
        states.append(state)
    return weights, states


def guided_loss_step(probabilities, labels, guidance, mode="guided"):
    """Algorithm step for one pair or a batch: returns ``(loss, weights, states)``.

    The weights are computed from the current forward values and enter the
    loss as constants. For a 1-D input, single weights/state are returned.
    """
    weights, states = guided_weights(probabilities, labels, guidance, mode)
    loss = weighted_ib_ce_loss(probabilities, labels, weights)
    if np.ndim(labels) == 1:
        return loss, weights[0], states[0]
    return loss, weights, states


def random_nondegenerate_state(rng, lo=10, hi=100_000):
    """Confusion state with both unit steps defined, at least one TP and one error."""
    n_pos = int(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    n_neg = int(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    while True:
        x = int(rng.integers(0, n_pos - 1))
        y = int(rng.integers(0, n_neg))
        if x or y:
            return ConfusionState(n_pos, n_neg, x, y)


def random_category_losses(rng):
    l_tp, l_tn = rng.uniform(0.0, 1.0, size=2)
    gap_pos, gap_neg = rng.uniform(0.01, 5.0, size=2)
    return CategoryLosses(float(l_tp), float(l_tn), float(l_tn + gap_neg), float(l_tp + gap_pos))


def theory_check(trials, seed, directions=1000, guidance_range=(0.5, 3.0)):
    """Check the solved weights on random states; returns the worst residuals.

    For every state: ``|lambda + mu - 1|``, the relative mismatch between
    ``dF_x / dF_y`` and the loss-partial ratio, and the largest value of
    ``(dl . d)(dF . d)`` over random directions ``d`` (never positive when
    the two gradients are anti-parallel).
    """
    rng = np.random.default_rng(seed)
    worst_sum = worst_ratio = 0.0
    worst_product = -np.inf
    fallbacks = 0
    for _ in range(trials):
        state = random_nondegenerate_state(rng)
        losses = random_category_losses(rng)
        n = float(rng.uniform(*guidance_range))
        w = solve_class_weights(state, losses, FnGuidance(n))
        fallbacks += w.fallback
        worst_sum = max(worst_sum, abs(w.lam + w.mu - 1.0))
        parts = numerical_fn_partials(state, FnGuidance(n))
        lx, ly = loss_partials(state, losses, w)
        target = parts.dx / parts.dy
        worst_ratio = max(worst_ratio, abs(target - lx / ly) / abs(target))
        d = rng.normal(size=(directions, 2))
        prod = (lx * d[:, 0] + ly * d[:, 1]) * (parts.dx * d[:, 0] + parts.dy * d[:, 1])
        worst_product = max(worst_product, float(prod.max()))
    return {"trials": trials, "max_sum_error": worst_sum, "max_ratio_residual": worst_ratio,
            "max_direction_product": worst_product, "fallbacks": fallbacks}
