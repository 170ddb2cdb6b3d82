import json

import numpy as np
import pytest

from privatar.attack import (AttackReport, MlpAttacker, ReferenceBank, build_reference_bank,
                             cross_entropy, empirical_attack, empirical_attack_batch,
                             evaluate_psr, grad_check, mlp_from_bytes, mlp_to_bytes,
                             reference_distances, softmax, train_mlp, wilson_interval,
                             write_reports_csv, write_reports_json)
from privatar.corpus import dataset_mean
from privatar.frequency import PartitionPlan, block_dct
from privatar.rng import RngStream

# statsmodels proportion_confint(method="wilson"), frozen
WILSON = {(0, 10): (0.0, 0.27753279986288926), (5, 10): (0.23659309051256394, 0.7634069094874361),
          (10, 10): (0.7224672001371106, 1.0),
          (31, 2000): (0.010940972933704062, 0.021916645881830028),
          (52, 2000): (0.019882087677964753, 0.033935273144663027)}


@pytest.mark.parametrize("key", sorted(WILSON))
def test_wilson_matches_oracle(key):
    lo, hi = wilson_interval(*key)
    assert lo == pytest.approx(WILSON[key][0], abs=1e-12)
    assert hi == pytest.approx(WILSON[key][1], abs=1e-12)


def test_report_and_combined():
    labels = np.array([0, 1, 2, 3])
    reports = evaluate_psr({"a": [0, 1, 0, 0], "b": [0, 1, 2, 0]}, labels)
    assert reports["a"].e_psr == 0.5 and reports["b"].e_psr == 0.75
    assert reports["combined"].correct == 3
    r = AttackReport("x", 10, 5)
    lo, hi = r.ci
    assert lo <= r.e_psr <= hi and r.contains(0.5) and not r.contains(0.9)
    with pytest.raises(ValueError):
        evaluate_psr({"a": [0]}, labels)
    with pytest.raises(ValueError):
        evaluate_psr({"a": []}, [])


def test_report_files(tmp_path):
    reps = [AttackReport("empirical", 4, 1), AttackReport("combined", 4, 1)]
    write_reports_csv(tmp_path / "r.csv", reps)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == \
        "attacker,trials,correct,e_psr,ci_lo,ci_hi"
    write_reports_json(tmp_path / "r.json", reps, {"seed": 1})
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["meta"] == {"seed": 1} and data["reports"][0]["e_psr"] == 0.25


def test_softmax_and_cross_entropy():
    p = softmax(np.array([[0.0, np.log(3.0)], [1000.0, 1000.0]]))
    assert np.allclose(p, [[0.25, 0.75], [0.5, 0.5]])
    assert cross_entropy(p, np.array([1, 0])) == pytest.approx(-(np.log(0.75) + np.log(0.5)) / 2)


def test_reference_bank_exact_recovery(small_corpus):
    plan = PartitionPlan(4, tuple(range(2, 16)), (0, 1))
    mean = dataset_mean(small_corpus)
    bank = build_reference_bank(small_corpus, plan, mean, RngStream(0))
    assert bank.labels == tuple(range(12)) and bank.references.shape[:2] == (12, 14)
    # a reference queried against its own bank is recovered exactly
    for k, label in enumerate(bank.labels):
        assert empirical_attack(bank.references[k], bank) == label
    assert np.array_equal(empirical_attack_batch(bank.references, bank), bank.labels)
    # distances agree with a brute-force oracle
    q = block_dct(small_corpus.frames[5].texture, mean).select(plan.offloaded_ids)
    brute = np.array([np.sum((q.planes.astype(np.float64) - r) ** 2) for r in bank.references])
    assert np.allclose(reference_distances(q, bank)[0], brute, rtol=1e-9)
    with pytest.raises(ValueError):
        empirical_attack(np.zeros((3, 3)), bank)


def test_tie_goes_to_lower_label():
    plan = PartitionPlan(2, (2, 3), (0, 1))
    refs = np.zeros((2, 2, 1, 1, 3))
    bank = ReferenceBank(plan, (4, 9), refs)
    assert empirical_attack(np.zeros((2, 1, 1, 3)), bank) == 4
    with pytest.raises(ValueError):
        ReferenceBank(plan, (4, 4), refs)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    model = MlpAttacker.init((6, 5, 4), RngStream(seed, b"g"))
    x = RngStream(seed, b"x").standard_normal(6)
    assert grad_check(model, x, seed % 4) <= 1e-4


def test_training_reduces_loss_and_is_deterministic():
    rng = RngStream(0)
    centers = rng.standard_normal((3, 8)) * 3.0
    y = np.repeat(np.arange(3), 30)
    X = centers[y] + rng.standard_normal((90, 8))
    a = train_mlp(X, y, classes=3, hidden=(16,), lr=0.05, epochs=20, seed=4)
    b = train_mlp(X, y, classes=3, hidden=(16,), lr=0.05, epochs=20, seed=4)
    assert a.history[-1] < 0.5 * a.history[0]
    assert np.mean(a.predict(X) == y) > 0.9
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    with pytest.raises(ValueError):
        train_mlp(X, y + 5, classes=3)


def test_mlp_container_roundtrip():
    model = MlpAttacker.init((4, 3, 2), RngStream(1))
    back = mlp_from_bytes(mlp_to_bytes(model))
    assert back.dims == model.dims
    assert all(np.array_equal(p, q) for p, q in zip(back.params(), model.params()))
    with pytest.raises(ValueError):
        MlpAttacker((4, 3), [np.zeros((3, 4))], [np.zeros(3)])
