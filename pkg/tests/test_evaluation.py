import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aptlm import evaluation as E
from aptlm import model as M
from aptlm import ontology
from aptlm.errors import ConfigError, ContractViolation, DependencyError
from aptlm.tasks import TaskExample


def brute_force_ap(scores, relevant):
    # rank of item i: items scored higher, plus equal scores earlier in the list, plus itself
    n = len(scores)
    precisions = []
    for i in range(n):
        if not relevant[i]:
            continue
        ahead = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]
        precisions.append((len(ahead), sum(bool(relevant[j]) for j in ahead) / len(ahead)))
    return float(np.mean([p for _, p in sorted(precisions)]))


def test_map_hand_oracle():
    scores = np.array([[0.9, 0.7], [0.8, 0.2], [0.1, 0.6]])
    rel = np.array([[1, 0], [1, 1], [0, 1]], dtype=bool)
    res = E.mean_average_precision(scores, rel, ["A", "B"])
    assert res.per_class["A"] == 1.0
    assert res.per_class["B"] == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert res.value == pytest.approx(0.7917, abs=1e-4)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.data())
def test_map_equals_brute_force(n, c, data):
    # small integer scores force plenty of ties
    scores = data.draw(hnp.arrays(np.int64, (n, c), elements=st.integers(0, 3))).astype(float)
    rel = data.draw(hnp.arrays(bool, (n, c)))
    if not rel.any():
        with pytest.raises(ContractViolation):
            E.mean_average_precision(scores, rel)
        return
    res = E.mean_average_precision(scores, rel)
    keep = [k for k in range(c) if rel[:, k].any()]
    assert res.excluded == [k for k in range(c) if k not in keep]
    want = float(np.mean([brute_force_ap(scores[:, k], rel[:, k]) for k in keep]))
    assert res.value == want


def test_map_shape_mismatch():
    with pytest.raises(ContractViolation):
        E.mean_average_precision(np.zeros((2, 3)), np.ones((3, 2), dtype=bool))


@pytest.mark.parametrize("pred,target,want", [
    ("First.", "first", 1.0),
    ("  Dog   bark! ", "dog bark", 1.0),
    ("it’s", "it's", 1.0),
    ("second", "first", 0.0),
    ("1.2s-3.4s", "1.2s-3.4s", 1.0),
])
def test_exact_match_normalization(pred, target, want):
    assert E.exact_match([pred], [target]) == want


def test_exact_match_errors_and_empty():
    assert E.exact_match([], []) == 0.0
    with pytest.raises(ContractViolation):
        E.exact_match(["a"], [])


@pytest.mark.parametrize("pred,ref,want", [
    ("dog bark twice", "dog bark twice", 1.0),
    ("dog bark once", "dog bark twice", 2 / 3),
    ("rain", "dog bark", 0.0),
    ("dog dog", "dog", 2 * (1 / 2) * 1 / (1 / 2 + 1)),
    ("", "", 1.0),
    ("", "rain", 0.0),
])
def test_token_f1_fixtures(pred, ref, want):
    assert E.token_f1(pred, ref) == pytest.approx(want)


def test_majority_baseline_ties_alphabetical():
    assert E.majority_baseline(["no", "Yes", "yes.", "no"]) == (0.5, "no")
    assert E.majority_baseline([]) == (0.0, "")


def test_cosine_probabilities():
    p = E.cosine_probabilities([1.0, 0.0], [[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert p.sum() == pytest.approx(1.0)
    assert p[0] > p[1] > p[2]
    assert p[0] / p[1] == pytest.approx(np.e)


def test_cosine_classify_needs_embedder():
    with pytest.raises(DependencyError):
        E.cosine_classify("rain", ["rain", "wind"], None)
    flat = E.cosine_classify("x", ["rain", "wind"], lambda texts: [None] + [np.ones(2)] * 2)
    assert list(flat) == [0.5, 0.5]


@pytest.mark.parametrize("task,metric", [("AAC", "map"), ("SEC", "token_f1"), ("AT", "bleu"), ("XYZ", None)])
def test_metric_task_mismatch(task, metric):
    with pytest.raises(ConfigError):
        E.check_metric(task, metric)


def fake_embedder(texts):
    out = []
    for t in texts:
        v = np.zeros(len(ontology.LABELS))
        for i, lb in enumerate(ontology.LABELS):
            v[i] = lb in t
        out.append(v)
    return out


def test_evaluate_with_perfect_predictions(monkeypatch, tmp_path):
    exs = [TaskExample("SEC", [f"c{i}"], "How many?", str(i % 3)) for i in range(6)]
    exs.append(TaskExample("AT", ["c9"], "Tags?", "rain"))
    monkeypatch.setattr(M, "generate_text", lambda model, store, examples, *a: [ex.target + "." for ex in examples])
    rep = E.evaluate(None, None, exs, "SEC")
    assert rep.value == 1.0 and rep.count == 6 and rep.extra["majority"] == pytest.approx(1 / 3, abs=1e-4)
    assert rep.recompute() == rep.value
    path = rep.write(tmp_path)
    assert len(path.read_text().splitlines()) == 6
    assert "value=1.0000" in (tmp_path / "SEC_exact_match.summary.txt").read_text()
    with pytest.raises(ContractViolation):
        E.evaluate(None, None, exs[:6], "AT")


def test_evaluate_map_path(monkeypatch):
    exs = [TaskExample("AT", [f"c{i}"], "Tags?", t) for i, t in enumerate(["rain", "dog bark", "rain, dog bark"])]
    monkeypatch.setattr(M, "generate_text", lambda model, store, examples, *a: [ex.target for ex in examples])
    rep = E.evaluate(None, None, exs, "AT", embedder=fake_embedder)
    assert rep.metric == "map" and rep.value == 1.0
    assert rep.recompute() == pytest.approx(rep.value)
    assert rep.extra["excluded_classes"] == len(ontology.LABELS) - 2
    with pytest.raises(DependencyError):
        E.evaluate(None, None, exs, "AT")
