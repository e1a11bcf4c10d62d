import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aptlm import autograd as ag
from aptlm import curriculum as C
from aptlm import model as M
from aptlm import pipeline as P
from aptlm.config import Config
from aptlm.errors import ConfigError, TrainingDiverged
from aptlm.optim import lr_at

TABLE = {
    0: {"AT", "AAC"},
    1: {"AT", "AAC", "AQA", "QSED", "TER", "SEC"},
    2: {"AT", "AAC", "AQA", "QSED", "TER", "SEC", "FSC", "NLAR"},
}


def test_default_plan_matches_table():
    plan = C.build_stage_plan(Config())
    assert [sc.stage for sc in plan] == [0, 1, 2]
    for sc in plan:
        assert set(sc.tasks) == TABLE[sc.stage]
        assert "lm" not in sc.trainable
    assert plan[0].objective == "triplet" and plan[1].objective == plan[2].objective == "lm"
    assert plan[0].trainable == ("aligner",)
    assert "audio-marker" in plan[1].trainable and "audio-marker" in plan[2].trainable


@pytest.mark.parametrize("key,value", [
    ("stage0_tasks", "AT,AAC,NLAR"),
    ("stage1_tasks", "AT,AAC,AQA,QSED,TER,SEC,FSC"),
    ("stage0_tasks", "AT"),
    ("stage2_tasks", "AT,AAC,AQA,QSED,TER,SEC,FSC,BOGUS"),
])
def test_misplaced_tasks_rejected(key, value):
    with pytest.raises(ConfigError):
        C.build_stage_plan(Config().replace(**{key: value}))


def test_nlar_flag_consistency():
    no = Config().replace(train_nlar=False, stage2_tasks="AT,AAC,AQA,QSED,TER,SEC,FSC")
    assert "NLAR" not in C.build_stage_plan(no)[2].tasks
    with pytest.raises(ConfigError):
        C.build_stage_plan(Config().replace(train_nlar=False))


def test_mix_weights_follow_manifest_sizes():
    sizes = {t: 10 * (i + 1) for i, t in enumerate(sorted(TABLE[2]))}
    plan = C.build_stage_plan(Config(), sizes)
    assert plan[2].mix_weights == {t: float(sizes[t]) for t in plan[2].tasks}


def test_stage_config_invariants():
    with pytest.raises(ConfigError):
        C.StageConfig(1, ("AT",), ("aligner", "lm"), 10, 1e-3, 2, 4)
    with pytest.raises(ConfigError):
        C.StageConfig(0, ("AT",), ("aligner", "encoder"), 10, 1e-3, 2, 4)


@pytest.mark.parametrize("step,want", [(50, 5e-5), (100, 1e-4), (1000, 0.0), (0, 0.0)])
def test_lr_examples(step, want):
    assert lr_at(step, 1e-4, 100, 1000) == pytest.approx(want, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 200), st.integers(1, 500), st.integers(0, 800))
def test_lr_nonnegative_and_continuous(w, extra, s):
    t = w + extra
    assert 0.0 <= lr_at(s, 1.0, w, t) <= 1.0
    if w:
        assert abs(lr_at(w, 1.0, w, t) - lr_at(w - 1, 1.0, w, t)) <= 1.0 / w + 1e-12


def test_lr_rejects_short_schedule():
    with pytest.raises(ConfigError):
        lr_at(0, 1.0, 10, 10)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.sampled_from(sorted(TABLE[2])), st.integers(1, 20), min_size=1), st.integers(1, 400))
def test_schedule_is_proportional(weights, steps):
    sched = C.task_schedule({k: float(v) for k, v in weights.items()}, steps)
    total = sum(weights.values())
    for k, v in weights.items():
        assert abs(sched.count(k) - steps * v / total) <= len(weights)


def test_batch_sampler_covers_each_epoch():
    s = C.BatchSampler(3, 1, {"AT": 10}, 4)
    seen = [i for k in range(5) for i in s.indices("AT", k)]
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:20]) == list(range(10))
    assert seen == [i for k in range(5) for i in C.BatchSampler(3, 1, {"AT": 10}, 4).indices("AT", k)]


def _gn_hook(rows):
    return lambda tr, sc, row: rows.append((sc.stage, dict(row)))


def test_stage_gradients_respect_groups(tiny_run):
    cfg = tiny_run()
    rows = []
    P.train(cfg, "all", hooks=[_gn_hook(rows)], log=lambda *a: None)
    s0 = [r for s, r in rows if s == 0]
    assert s0 and all(r["gn_lm"] == 0 and r["gn_encoder"] == 0 and r["gn_audio_marker"] == 0 for r in s0)
    assert all(r["gn_aligner"] > 0 for r in s0)
    for stage in (1, 2):
        rs = [r for s, r in rows if s == stage]
        assert all(r["gn_lm"] == 0 and r["gn_encoder"] == 0 for r in rs)
        assert any(r["gn_audio_marker"] > 0 for r in rs)


def test_same_seed_same_losses(tiny_run, tmp_path):
    a = tiny_run()
    la, lb = [], []
    P.train(a, 0, hooks=[_gn_hook(la)], log=lambda *x: None)
    b = a.replace(out_dir=str(tmp_path / "again"))
    P.checkpoint_dir(b).mkdir(parents=True)
    P.checkpoint_path(b, "lm").write_bytes(P.checkpoint_path(a, "lm").read_bytes())
    P.train(b, 0, hooks=[_gn_hook(lb)], log=lambda *x: None)
    assert [r["loss"] for _, r in la] == [r["loss"] for _, r in lb]


def test_nan_loss_aborts_with_snapshot(tiny_run, monkeypatch):
    cfg = tiny_run()
    P.train(cfg, 0, log=lambda *a: None)
    monkeypatch.setattr(M, "lm_batch_loss", lambda *a, **k: ag.constant(np.nan))
    with pytest.raises(TrainingDiverged) as e:
        P.train(cfg, 1, log=lambda *a: None)
    assert e.value.snapshot["row"]["step"] == 0
