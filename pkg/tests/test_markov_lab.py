import csv
import math

import numpy as np
import pytest

from unlearn_lab import markov_lab as ml
from unlearn_lab.errors import ParameterError
from unlearn_lab.model_core import forward_probs
from unlearn_lab.synth_data import MarkovCorpus


@pytest.fixture(scope="module")
def study():
    cfg = ml.MarkovConfig(seed=0)
    prob = ml.build_markov_problem(cfg)
    return prob, ml.run_case_study(cfg, prob)


def test_pairs_from_one_sequence():
    c = MarkovCorpus(np.array([[1, 3, 2]]), np.array(["retain"]), 0)
    ds = ml.sequences_to_pairs(c)
    assert ds.n == 2
    assert set(ds.features.argmax(axis=1)) <= {1, 2, 3}
    assert ds.labels.tolist() == [3, 2]


def test_pair_count(study):
    prob, _ = study
    c = prob.corpus
    assert prob.pairs.n == len(c) * (c.sequences.shape[1] - 1)
    assert prob.forget_mask.sum() == 2 * prob.pairs.n // 3


def test_pairs_need_two_states():
    with pytest.raises(ParameterError):
        ml.sequences_to_pairs(MarkovCorpus(np.array([[1]]), np.array(["retain"]), 0))


def test_references():
    np.testing.assert_allclose(ml.analytic_retrained_reference(1), [0, 1 / 3, 1 / 3, 1 / 3, 0, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(ml.source_reference(4), [0, 0, 0, 0, 1 / 3, 1 / 3, 1 / 3, 0, 0, 0])
    for s in range(1, 10):
        assert ml.source_reference(s).sum() == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        ml.analytic_retrained_reference(4)


def test_trained_conditional_is_near_uniform(study):
    prob, res = study
    P = forward_probs(prob.model, ml.one_hot([1, 2, 3]))
    np.testing.assert_allclose(P[:, 1:4], 1 / 3, atol=0.05)
    np.testing.assert_allclose(forward_probs(prob.model, np.eye(10)).sum(axis=1), 1.0, atol=1e-12)
    assert abs(res.original.loss_retain - math.log(3)) <= 0.02


def test_unlearning_raises_forget_loss(study):
    _, res = study
    for m in ml.CASE_METHODS:
        assert res.final(m).loss_forget >= res.original.loss_forget
    assert res.final("imu").loss_forget > res.original.loss_forget


def test_retain_conditional_stays_close_after_imu(study):
    _, res = study
    assert res.final("imu").kl_retain <= 0.05


@pytest.mark.xfail(strict=True, reason="IMU ascends only on the selected pairs, so forget contexts "
                                        "concentrate on the unselected state of their own chain")
def test_forget_mass_leaves_forget_chain(study):
    prob, res = study
    before = ml.forget_state_mass(prob.model, prob)
    after = ml.forget_state_mass(res.final_states["imu"], prob)
    assert before - after >= 0.3


def test_all_tables_nonnegative(study):
    _, res = study
    for tables in res.grid.values():
        for t in tables.values():
            assert min(t.loss_retain, t.loss_forget, t.kl_retain, t.kl_forget) >= 0


def test_simnpo_forgets_at_least_as_much_as_ga(study):
    _, res = study
    s, g = res.final("simnpo"), res.final("ga")
    assert abs(s.loss_retain - g.loss_retain) <= 1e-3
    assert s.loss_forget >= g.loss_forget


def test_unsupported_method():
    with pytest.raises(ParameterError):
        ml.run_case_study(ml.MarkovConfig(methods=("rl",)))


def test_case_study_csv(tmp_path, study):
    _, res = study
    ml.write_case_study_csv(tmp_path / "c.csv", res)
    rows = list(csv.DictReader((tmp_path / "c.csv").open()))
    assert [r["method"] for r in rows] == ["original", *ml.CASE_METHODS]
    assert list(rows[0]) == ml.CSV_COLUMNS
