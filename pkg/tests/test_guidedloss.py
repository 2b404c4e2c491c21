import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnguided import diffcore as dc
from fnguided import guidedloss as gl

# exact-arithmetic values of the (100, 900, 20, 90), n=2 state
F2_STATE = 0.7017543859649122
DFX_STATE = -0.007554034471063423
DFY_STATE = -0.00122899191937813
LAMBDA_STATE = 0.338716511506846  # with gaps 1.2 (positive) and 0.9 (negative)


def _fn_exact(n_pos, x, y, n):
    tp = n_pos - x
    p, r = Fraction(tp, tp + y), Fraction(tp, n_pos)
    n2 = Fraction(n) ** 2
    return (1 + n2) * p * r / (n2 * p + r)


def test_frozen_values_match_exact_oracle():
    base = _fn_exact(100, 20, 90, 2)
    assert float(base) == pytest.approx(F2_STATE, abs=1e-15)
    assert float(_fn_exact(100, 21, 90, 2) - base) == pytest.approx(DFX_STATE, abs=1e-15)
    assert float(_fn_exact(100, 20, 91, 2) - base) == pytest.approx(DFY_STATE, abs=1e-15)


def test_fn_measure_examples():
    assert gl.fn_measure(gl.ConfusionState(10, 10, 5, 5), 1.0) == pytest.approx(0.5)
    assert gl.fn_measure(gl.ConfusionState(10, 10, 0, 0), 2.0) == 1.0
    assert abs(gl.fn_measure(gl.ConfusionState(100, 900, 20, 90), gl.FnGuidance(2)) - 0.70175) < 1e-5
    assert gl.fn_measure(gl.ConfusionState(10, 10, 10, 3), 2.0) == 0.0


def test_invalid_state_and_guidance():
    with pytest.raises(ValueError):
        gl.ConfusionState(5, 5, 6, 0)
    with pytest.raises(ValueError):
        gl.FnGuidance(0.0)


def test_confusion_examples():
    s = gl.confusion_from_logits([0.9, 0.2, 0.7, 0.1], [1, 1, 0, 0])
    assert (s.n_pos, s.n_neg, s.x, s.y) == (2, 2, 1, 1)
    s = gl.confusion_from_logits([0.9, 0.1], [1, 0])
    assert (s.x, s.y) == (0, 0)
    s = gl.confusion_from_logits([0.5, 0.5], [1, 0])
    assert (s.x, s.y) == (1, 0)
    with pytest.raises(gl.GuidedLossError):
        gl.confusion_from_logits([1.2, 0.1], [1, 0])


def test_category_loss_examples():
    c = gl.category_average_losses([0.9, 0.2, 0.1], [1, 1, 0])
    assert abs(c.l_tp - 0.10536) < 1e-5
    assert abs(c.l_fn - 1.60944) < 1e-5
    assert c.l_fp == pytest.approx(0.69315, abs=1e-5) and c.empty["fp"]
    assert not c.empty["tp"]


def test_numerical_partials_example():
    p = gl.numerical_fn_partials(gl.ConfusionState(100, 900, 20, 90), 2.0)
    assert abs(p.dx - (-0.007553)) < 1e-5
    assert abs(p.dy - (-0.001227)) < 1e-5
    assert p.dx == pytest.approx(DFX_STATE, abs=1e-15)
    perfect = gl.numerical_fn_partials(gl.ConfusionState(50, 50, 0, 0), 2.0)
    assert perfect.dx <= 0 and perfect.dy <= 0
    deg = gl.numerical_fn_partials(gl.ConfusionState(50, 50, 50, 3), 2.0)
    assert deg.dx == 0.0 and deg.degenerate_x


def test_analytic_partials_examples():
    p = gl.analytic_fn_partials(gl.ConfusionState(100, 100, 0, 0), 1.0)
    assert p.dx == pytest.approx(-0.005) and p.dy == pytest.approx(-0.005)
    s = gl.ConfusionState(100, 900, 20, 90)
    a, n = gl.analytic_fn_partials(s, 2.0), gl.numerical_fn_partials(s, 2.0)
    assert abs(a.dx - n.dx) / abs(n.dx) < 0.05 and abs(a.dy - n.dy) / abs(n.dy) < 0.05
    with pytest.raises(gl.GuidedLossError):
        gl.analytic_fn_partials(gl.ConfusionState(10, 10, 10, 0), 2.0)


def test_solver_example():
    s = gl.ConfusionState(100, 900, 20, 90)
    losses = gl.CategoryLosses(l_tp=0.1, l_tn=0.2, l_fp=1.1, l_fn=1.3)
    w = gl.solve_class_weights(s, losses, 2.0)
    assert abs(w.lam - 0.3390) < 5e-3 and abs(w.mu - 0.6610) < 5e-3
    assert w.lam == pytest.approx(LAMBDA_STATE, rel=1e-12)
    assert w.lam + w.mu == 1.0 and not w.fallback
    lx, ly = gl.loss_partials(s, losses, w)
    assert abs(DFX_STATE / DFY_STATE - lx / ly) / abs(DFX_STATE / DFY_STATE) < 1e-9


def test_solver_symmetric_and_fallback():
    # with x = y and n_pos = n_neg, F1's unit-step partials coincide
    s = gl.ConfusionState(50, 50, 10, 10)
    losses = gl.CategoryLosses(0.2, 0.2, 1.0, 1.0)
    parts = gl.numerical_fn_partials(s, 1.0)
    w = gl.solve_class_weights(s, losses, 1.0)
    k = parts.dx / parts.dy
    assert w.lam == pytest.approx(k / (1 + k))
    assert gl.solve_class_weights(gl.ConfusionState(20, 20, 0, 0),
                                  gl.CategoryLosses(0.1, 0.1, 0.1, 0.1), 1.0).lam == 0.5
    w = gl.solve_class_weights(gl.ConfusionState(10, 10, 10, 2), losses, 2.0)
    assert (w.lam, w.mu, w.fallback) == (0.5, 0.5, True)
    w = gl.solve_class_weights(gl.ConfusionState(10, 10, 3, 2), gl.CategoryLosses(0.5, 0.1, 1.0, 0.5), 2.0)
    assert w.fallback


def test_symmetric_case_exact():
    # equal partials, balanced classes and gaps give exactly 0.5
    class _P:
        dx = dy = -0.01
        degenerate_x = degenerate_y = False
    s = gl.ConfusionState(40, 40, 5, 5)
    losses = gl.CategoryLosses(0.1, 0.1, 0.9, 0.9)
    orig = gl.numerical_fn_partials
    try:
        gl.numerical_fn_partials = lambda state, guidance: _P()
        w = gl.solve_class_weights(s, losses, 1.0)
    finally:
        gl.numerical_fn_partials = orig
    assert w.lam == 0.5 and w.mu == 0.5


def test_weighted_loss_examples():
    lab = np.array([1, 1, 0, 0], bool)
    p = np.array([0.9, 0.2, 0.7, 0.1])
    loss = gl.weighted_ib_ce_loss(p, lab, gl.ClassWeights(0.339, 0.661))
    expected = 0.339 * (-math.log(0.9) - math.log(0.2)) / 2 + 0.661 * (-math.log(0.3) - math.log(0.9)) / 2
    assert abs(float(loss.value) - 0.7235) < 1e-3
    assert float(loss.value) == pytest.approx(expected, rel=1e-14)
    ibce = gl.weighted_ib_ce_loss(p, lab, gl.ClassWeights.balanced())
    assert float(ibce.value) == pytest.approx(0.5 * (-math.log(0.9) - math.log(0.2)) / 2
                                              + 0.5 * (-math.log(0.3) - math.log(0.9)) / 2)
    sat = gl.weighted_ib_ce_loss(np.array([1.0, 1.0, 0.0, 0.0]), lab, gl.ClassWeights.balanced())
    assert float(sat.value) < 1e-6
    with pytest.raises(gl.GuidedLossError):
        gl.weighted_ib_ce_loss(p, np.ones(4, bool), gl.ClassWeights.balanced())


def test_weighted_loss_gradient(rng):
    for _ in range(10):
        lab = rng.random((3, 12)) < 0.4
        lab[:, 0], lab[:, 1] = True, False
        ws = [gl.ClassWeights(l, 1 - l) for l in rng.uniform(0.05, 0.95, 3)]
        pt = rng.uniform(0.05, 0.95, size=(3, 12))
        assert dc.finite_difference_check(lambda q: gl.weighted_ib_ce_loss(q, lab, ws), pt) < 1e-6


def test_guided_step_composition():
    lab = np.array([1, 1, 0, 0], bool)
    p = np.array([0.9, 0.2, 0.7, 0.1])
    loss, w, s = gl.guided_loss_step(p, lab, gl.FnGuidance(2.0))
    assert (s.n_pos, s.n_neg, s.x, s.y) == (2, 2, 1, 1)
    ref = gl.solve_class_weights(s, gl.category_average_losses(p, lab), 2.0)
    assert w == ref
    assert float(loss.value) == float(gl.weighted_ib_ce_loss(p, lab, ref).value)
    loss2, w2, s2 = gl.guided_loss_step(p, lab, gl.FnGuidance(2.0))
    assert float(loss2.value) == float(loss.value) and w2 == w and s2 == s


def test_guided_step_perfect_predictions():
    lab = np.array([1, 0, 1, 0], bool)
    loss, w, _ = gl.guided_loss_step(np.array([1.0, 0.0, 1.0, 0.0]), lab, 2.0)
    assert (w.lam, w.mu) == (0.5, 0.5) and float(loss.value) < 1e-6


def test_weights_are_constants_in_graph(rng):
    lab = np.array([1, 1, 0, 0, 1, 0], bool)
    pt = np.array([0.8, 0.3, 0.6, 0.2, 0.55, 0.45])
    p = dc.parameter(pt)
    loss, w, _ = gl.guided_loss_step(p, lab, 2.0)
    g = dc.backpropagate(loss)[p]
    ref = dc.parameter(pt)
    g_ref = dc.backpropagate(gl.weighted_ib_ce_loss(ref, lab, w))[ref]
    np.testing.assert_array_equal(g, g_ref)


def test_modes():
    lab = np.array([[1, 0, 0, 0], [1, 1, 0, 0]], bool)
    p = np.array([[0.6, 0.4, 0.3, 0.7], [0.9, 0.2, 0.6, 0.1]])
    ws, _ = gl.guided_weights(p, lab, 2.0, mode="ibce")
    assert all((w.lam, w.mu) == (0.5, 0.5) for w in ws)
    ws, _ = gl.guided_weights(p, lab, 2.0, mode="ce")
    assert [w.lam for w in ws] == [0.25, 0.5]
    with pytest.raises(ValueError):
        gl.guided_weights(p, lab, 2.0, mode="focal")


def test_ce_mode_equals_plain_mean_cross_entropy():
    lab = np.array([1, 0, 0, 0, 1], bool)
    p = np.array([0.7, 0.2, 0.4, 0.1, 0.3])
    loss, _, _ = gl.guided_loss_step(p, lab, 1.0, mode="ce")
    plain = -np.mean(np.where(lab, np.log(p), np.log(1 - p)))
    assert float(loss.value) == pytest.approx(plain, rel=1e-14)


def test_theory_check_small():
    res = gl.theory_check(500, seed=3, directions=200)
    assert res["max_sum_error"] == 0.0
    assert res["max_ratio_residual"] < 1e-9
    assert res["max_direction_product"] <= 1e-12
    assert res["fallbacks"] == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(10, 100_000), st.integers(10, 100_000), st.floats(0, 1), st.floats(0, 1),
       st.floats(0.5, 3.0))
def test_sign_constraints(n_pos, n_neg, fx, fy, n):
    x = min(int(fx * (n_pos - 1)), n_pos - 2)
    y = min(int(fy * n_neg), n_neg - 1)
    s = gl.ConfusionState(n_pos, n_neg, x, y)
    num = gl.numerical_fn_partials(s, n)
    ana = gl.analytic_fn_partials(s, n)
    assert num.dx <= 0 and num.dy <= 0 and ana.dx <= 0 and ana.dy <= 0
    losses = gl.CategoryLosses(0.1, 0.2, 0.9, 1.4)
    w = gl.solve_class_weights(s, losses, n)
    assert w.lam + w.mu == 1.0 and 0 <= w.lam <= 1
    lx, ly = gl.loss_partials(s, losses, w)
    assert lx > 0 and ly > 0


@settings(max_examples=200, deadline=None)
@given(st.integers(10, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_guidance_monotonicity(n_pos, x_raw, y_raw):
    x = x_raw % n_pos
    y = y_raw
    s = gl.ConfusionState(n_pos, max(y, 1), x, y if y <= max(y, 1) else 0)
    p, r = gl.precision_recall(s)
    f = [gl.fn_measure(s, n) for n in (1.0, 2.0, 3.0)]
    if r > p:
        assert f[0] <= f[1] <= f[2]
    elif p > r:
        assert f[0] >= f[1] >= f[2]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_ordering_lemmas(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 200))
    p = rng.random(n)
    lab = rng.random(n) < rng.random()
    c = gl.category_average_losses(p, lab)
    if not c.empty["tp"] and not c.empty["fn"]:
        assert c.l_fn > c.l_tp
    if not c.empty["fp"] and not c.empty["tn"]:
        assert c.l_fp > c.l_tn
