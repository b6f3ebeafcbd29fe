import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unlearn_lab.errors import EmptySelectionError, NumericError, ParameterError
from unlearn_lab.influence import (
    HessianSolver,
    build_hessian,
    influence_on_forget,
    influence_report,
    influence_self,
    loo_agreement,
    loo_oracle,
    normalize_weights,
    select_negative,
    select_top_r,
)
from unlearn_lab.model_core import ClassifierState, TrainConfig, grad_classifier, hessian_classifier, train_classifier

from conftest import random_state


def test_influence_self_examples():
    solver = HessianSolver(3.0 * np.eye(4), 0.0)
    g = np.array([1.0, -2.0, 0.5, 0.0])
    np.testing.assert_allclose(influence_self(solver, g), -g / 3.0)
    np.testing.assert_array_equal(influence_self(solver, np.zeros(4)), 0.0)


@given(seed=st.integers(0, 5000))
def test_solve_residual(seed):
    rng = np.random.default_rng(seed)
    cls = random_state(rng)
    Z = rng.standard_normal((6, 4))
    solver = build_hessian(cls, Z, 1e-3)
    g = grad_classifier(cls, Z[0], 1)
    s = influence_self(solver, g)
    assert np.linalg.norm(solver.H @ s + g) <= 1e-8 * np.linalg.norm(g)


def test_singular_hessian_names_lambda():
    cls = ClassifierState.zeros(3, 2)
    with pytest.raises(NumericError, match="lambda"):
        build_hessian(cls, np.zeros((1, 2)), damping=0.0)


@given(seed=st.integers(0, 5000))
def test_singleton_self_influence_negative(seed):
    rng = np.random.default_rng(seed)
    cls = random_state(rng)
    z = rng.standard_normal((1, 4))
    y = [int(rng.integers(3))]
    raw, _ = influence_on_forget(cls, z, y, 1e-2)
    assert raw[0] < 0


def test_zero_gradients_give_zero_influence():
    sharp = ClassifierState(np.zeros((2, 1)), np.array([800.0, 0.0]))
    raw, _ = influence_on_forget(sharp, np.zeros((3, 1)), [0, 0, 0], 1e-3, relative=False)
    np.testing.assert_array_equal(raw, 0.0)


def test_selection_examples():
    assert select_negative([-0.5, 0.2, -0.1]).tolist() == [True, False, True]
    assert not select_negative([1.0, 2.0]).any()
    assert select_negative([0.0]).tolist() == [False]
    raw = np.array([-3.0, -1.0, -2.0])
    sel = select_negative(raw)
    assert select_top_r(raw, sel, 1.0).tolist() == sel.tolist()
    assert select_top_r(raw, sel, 1 / 3).tolist() == [True, False, False]
    # ties resolved towards the lower index
    assert select_top_r([-1.0, -1.0, -1.0], [True] * 3, 0.5).tolist() == [True, True, False]
    with pytest.raises(ParameterError):
        select_top_r(raw, sel, 0.0)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_weights([-4.0, -1.0], 100, [True, True]), [2 / 3, 1 / 3])
    np.testing.assert_allclose(normalize_weights([-2.0] * 4 + [5.0], 95, [True] * 4 + [False]),
                               [0.25] * 4 + [0.0])
    raw = -np.array([1.0, 2.0, 100.0]) ** 2
    w = normalize_weights(raw, 50, [True] * 3)
    assert w[0] / w[1] == pytest.approx(0.5)
    assert w[2] == pytest.approx(w[1])
    with pytest.raises(EmptySelectionError):
        normalize_weights([1.0], 95, [False])


@given(raw=st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30),
       q=st.floats(1, 100), q2=st.floats(1, 100))
def test_weight_simplex_and_truncation_monotonicity(raw, q, q2):
    raw = np.array(raw)
    sel = select_negative(raw)
    if not sel.any():
        return
    w = normalize_weights(raw, q, sel)
    assert (w >= 0).all() and (w[~sel] == 0).all()
    assert abs(w.sum() - 1) <= 1e-12
    lo, hi = sorted((q, q2))
    assert normalize_weights(raw, lo, sel).max() <= normalize_weights(raw, hi, sel).max() + 1e-12


def test_report_falls_back_to_uniform():
    # opposite labels on the same input: the mean forget gradient vanishes, so
    # every influence value is 0 and nothing is strictly negative
    cls = ClassifierState.zeros(2, 1)
    rep = influence_report(cls, np.ones((2, 1)), [0, 1], 1e-3)
    assert rep.fallback
    np.testing.assert_allclose(rep.weights, 0.5)


def test_report_csv(tmp_path, small_desk):
    Zf, yf = small_desk.forget
    rep = influence_report(small_desk.model, Zf, yf)
    rep.to_csv(tmp_path / "i.csv")
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "index,raw,selected,weight" and len(lines) == len(yf) + 1


def _train_rows(p):
    Ztr, ytr = p.train
    pos = np.searchsorted(p.split.train_indices, p.split.forget_indices)
    return Ztr, ytr, pos


def test_loo_requires_convexity(small_desk):
    Ztr, ytr, pos = _train_rows(small_desk)
    with pytest.raises(ParameterError):
        loo_oracle(Ztr, ytr, 3, pos, pos[:1], TrainConfig(l2=0.0))


def test_loo_identity_perturbation(small_desk):
    # "removing" nothing: retrain warm-started from the optimum on the same data
    cfg = small_desk.train_cfg
    Ztr, ytr, pos = _train_rows(small_desk)
    again = train_classifier(Ztr, ytr, 3, cfg, init=small_desk.model).state
    from unlearn_lab.influence import forget_loss

    Zf, yf = Ztr[pos], ytr[pos]
    assert abs(forget_loss(again, Zf, yf) - forget_loss(small_desk.model, Zf, yf)) <= 10 * cfg.tol


def test_loo_sign_on_1d_problem():
    # 2-class 1-D problem; the forget set is one class-1 point. Dropping another
    # class-1 point removes support for that class, so the forget loss goes up,
    # and the influence of up-weighting that point is negative.
    Z = np.array([[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    cfg = TrainConfig(l2=1e-2, tol=1e-10)
    base = train_classifier(Z, y, 2, cfg).state
    forget = np.array([3])
    recs = loo_oracle(Z, y, 2, forget, [4], cfg, base)
    assert recs[0].delta_loss > 0
    from unlearn_lab.influence import build_hessian as bh

    solver = bh(base, Z, 0.0, l2=cfg.l2)
    g_f = grad_classifier(base, Z[forget], y[forget]).mean(axis=0)
    infl = -g_f @ solver.solve(grad_classifier(base, Z[4], 1))
    assert infl < 0
    # up-weighting by eps ~ removal with eps = -1/n
    assert np.sign(-infl) == np.sign(recs[0].delta_loss)


def test_loo_agreement_on_desk(small_desk):
    Ztr, ytr, pos = _train_rows(small_desk)
    Zf, yf = Ztr[pos], ytr[pos]
    raw, _ = influence_on_forget(small_desk.model, Zf, yf, 1e-3, hessian_Z=Ztr, l2=small_desk.train_cfg.l2)
    recs = loo_oracle(Ztr, ytr, 3, pos, pos, small_desk.train_cfg, base=small_desk.model)
    assert loo_agreement(raw, recs) >= 0.9
