import json
import os
import time
from collections import defaultdict
from pathlib import Path

import pytest

from aptlm import config, dataset
from aptlm import model as M
from aptlm import pipeline as P

# a configuration where every stage runs in seconds
TINY = dict(train_clips=32, test_clips=16, examples_per_task=16, eval_examples_per_task=6, fsc_episodes=16,
            fsc_clips_per_class=3, fsc_test_clips_per_class=2, nlar_pairs=6, nlar_test_pairs=4,
            lm_corpus_examples=40, lm_steps=8, lm_batch=4, lm_warmup=2, stage0_steps=6, stage1_steps=6,
            stage2_steps=6, warmup_steps=2, batch_size=4)

CRITERIA = {
    1: "gradient correctness",
    2: "mask semantics",
    3: "freezing contract",
    4: "overfit demonstration",
    5: "few-shot transfer",
    6: "NLAR order sensitivity",
    7: "metric oracles",
    8: "structural fidelity",
    9: "reproducibility and persistence",
    10: "ablation bench",
}
_outcomes = defaultdict(list)


def tiny_config(out_dir, **kw):
    return config.smoke_config(out_dir=str(out_dir), **{**TINY, **kw})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[crit].append(report.outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        if "smoke" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.get_result().criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        got = _outcomes.get(n)
        if not got:
            status = "NOT RUN"
        elif all(o == "passed" for o in got):
            status = "PASS"
        elif all(o in ("passed", "skipped") for o in got):
            status = "SKIP"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {name}")


# ---------------------------------------------------------------------------
# tiny dataset and LM shared by the fast pipeline tests


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    dataset.render_dataset(tiny_config(root.parent), root, log=lambda *a: None)
    return root


@pytest.fixture(scope="session")
def tiny_lm(tmp_path_factory, tiny_root):
    out = tmp_path_factory.mktemp("tiny_lm")
    cfg = tiny_config(out, data_dir=str(tiny_root))
    P.train(cfg, "lm", log=lambda *a: None)
    return P.checkpoint_path(cfg, "lm")


@pytest.fixture
def tiny_run(tmp_path, tiny_root, tiny_lm):
    """Config for a fresh run dir that already holds the shared tiny LM checkpoint."""
    def make(**kw):
        cfg = tiny_config(tmp_path / "run", data_dir=str(tiny_root), **kw)
        P.checkpoint_dir(cfg).mkdir(parents=True, exist_ok=True)
        P.checkpoint_path(cfg, "lm").write_bytes(Path(tiny_lm).read_bytes())
        return cfg
    return make


# ---------------------------------------------------------------------------
# the full smoke curriculum, run once per session with per-step freezing checks


class FreezeMonitor:
    """Step hook: LM and encoder bytes never move, the marker moves only in stages 1-2."""

    def __init__(self, ref):
        self.lm = ref.group_bytes("lm")
        self.encoder = ref.group_bytes("encoder")
        self.marker = ref.group_bytes("audio-marker")
        self.steps = defaultdict(int)
        self.lm_changed = defaultdict(int)
        self.encoder_changed = defaultdict(int)
        self.marker_changed = defaultdict(int)
        self.marker_grad_steps = defaultdict(int)
        self.max_gn = defaultdict(float)
        self.t0 = {}
        self.t1 = {}

    def __call__(self, trainer, sc, row):
        st = str(sc.stage)
        now = time.perf_counter()
        self.t0.setdefault(st, now)
        self.t1[st] = now
        m = trainer.model
        self.steps[st] += 1
        self.lm_changed[st] += m.group_bytes("lm") != self.lm
        self.encoder_changed[st] += m.group_bytes("encoder") != self.encoder
        marker = m.group_bytes("audio-marker")
        self.marker_changed[st] += marker != self.marker
        self.marker = marker
        self.marker_grad_steps[st] += row.get("gn_audio_marker", 0.0) > 0
        for g in ("gn_lm", "gn_encoder"):
            self.max_gn[f"{st}/{g}"] = max(self.max_gn[f"{st}/{g}"], row.get(g, 0.0))

    def record(self):
        keys = ("steps", "lm_changed", "encoder_changed", "marker_changed", "marker_grad_steps", "max_gn")
        out = {k: dict(getattr(self, k)) for k in keys}
        out["stage_seconds"] = {s: self.t1[s] - self.t0[s] for s in self.t0}
        return out


class SmokeRun:
    def __init__(self, cfg, record):
        self.cfg = cfg
        self.record = record
        self.root = P.data_root(cfg)
        self._model = None
        self._store = None

    @property
    def model(self):
        if self._model is None:
            self._model = P.load_model(self.cfg, P.checkpoint_path(self.cfg, 2))
        return self._model

    @property
    def store(self):
        if self._store is None:
            self._store = M.FeatureStore(self.root, self.model)
        return self._store


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    """Render, pretrain the LM and run stages 0-2 on the smoke config.

    ``APTLM_SMOKE_DIR`` keeps the run between sessions; a finished run with its
    freezing record is reused as is.
    """
    keep = os.environ.get("APTLM_SMOKE_DIR")
    out = Path(keep) if keep else tmp_path_factory.mktemp("smoke")
    cfg = config.smoke_config(out_dir=str(out))
    rec_path = out / "smoke_record.json"
    if rec_path.exists() and P.checkpoint_path(cfg, 2).exists():
        return SmokeRun(cfg, json.loads(rec_path.read_text()))
    root = P.data_root(cfg)
    if not (root / "manifests").is_dir():
        dataset.render_dataset(cfg, root, log=lambda *a: None)
    lm_path = P.checkpoint_path(cfg, "lm")
    lm_seconds = None
    if not lm_path.exists():
        t = time.perf_counter()
        P.train(cfg, "lm", log=lambda *a: None)
        lm_seconds = time.perf_counter() - t
    mon = FreezeMonitor(P.load_model(cfg, lm_path))
    t = time.perf_counter()
    P.train(cfg, "all", hooks=[mon], log=lambda *a: None)
    record = mon.record()
    record["all_seconds"] = time.perf_counter() - t
    record["lm_seconds"] = lm_seconds
    rec_path.write_text(json.dumps(record, indent=1, sort_keys=True))
    return SmokeRun(cfg, record)
