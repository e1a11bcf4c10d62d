"""Paired-arm ablations over one rendered dataset: each arm differs from the base only on its axis."""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataset
from . import evaluation as E
from . import model as M
from . import pipeline as P
from .errors import ConfigError, TrainingDiverged
from .storage import file_hash, load_checkpoint, save_checkpoint

_NO_NLAR = "AT,AAC,AQA,QSED,TER,SEC,FSC"

AXES = {
    "aligner-arch": (("transformer", {}), ("linear", {"aligner_arch": "linear"})),
    "pooling": (("mean", {"aligner_arch": "linear", "pooling": "mean"}),
                ("learnable", {"aligner_arch": "linear", "pooling": "learnable"})),
    "tokens": (("16", {"n_query": 16}), ("32", {"n_query": 32}), ("64", {"n_query": 64})),
    "curriculum": (("multi-stage", {}), ("single-stage", {"stage": "single"})),
    "nlar": (("with-nlar", {}), ("without-nlar", {"train_nlar": False, "stage2_tasks": _NO_NLAR})),
}
ALIASES = {"aligner": "aligner-arch", "token-count": "tokens", "nlar-training": "nlar"}

# (axis) -> (reference arm, other arm, direction we expect from the full-scale system)
EXPECTED = {
    "curriculum": ("multi-stage", "single-stage", "multi-stage training should not trail single-stage"),
    "nlar": ("with-nlar", "without-nlar", "training on NLAR should help NLAR accuracy most"),
}

METRIC_COLS = ("AT_token_f1", "AAC_token_f1", "FSC_em", "NLAR_em")
COLUMNS = ("axis", "arm", "status", "final_loss", *METRIC_COLS, "NLAR_majority", "train_seconds",
           "manifest_hash", "lm_key")

# fields that decide what the pretrained LM checkpoint contains
LM_FIELDS = ("seed", "duration", "max_events_per_label", "lm_corpus_examples", "lm_corpus_mix", "n_mels",
             "sample_rate", "enc_dim", "enc_depth", "enc_heads", "grid_mel", "grid_time",
             "encoder_pretrain_steps", "n_query", "lm_depth", "lm_width", "lm_heads", "lm_max_positions",
             "lm_steps", "lm_lr", "lm_batch", "lm_warmup")


@dataclass
class AblationSpec:
    axis: str
    arms: tuple  # ((name, overrides), ...)
    base: object  # Config
    seed: int = 0

    @classmethod
    def for_axis(cls, axis, base):
        axis = ALIASES.get(axis, axis)
        if axis not in AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
        return cls(axis, AXES[axis], base, base.seed)

    def arm_config(self, name, out):
        ov = dict(dict(self.arms)[name])
        ov.pop("stage", None)
        known = {f.name for f in fields(self.base)}
        bad = set(ov) - known
        if bad:
            raise ConfigError(f"arm {name}: unknown keys {sorted(bad)}")
        return self.base.replace(out_dir=str(out), **ov)

    def arm_stage(self, name):
        return dict(self.arms)[name].get("stage", "all")


@dataclass
class AblationResult:
    axis: str
    rows: list
    csv_path: Path
    summary_path: Path
    deltas: dict = field(default_factory=dict)


def lm_key(cfg):
    blob = "\n".join(f"{k}={getattr(cfg, k)}" for k in LM_FIELDS)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def manifest_hash(root):
    files = sorted((Path(root) / "manifests").rglob("*"))
    return file_hash(*[f for f in files if f.is_file()])[:16]


def scaled(cfg, factor):
    """The same config with every step budget (and warmup) scaled by ``factor``."""
    if factor == 1:
        return cfg
    if factor <= 0:
        raise ConfigError("step scale must be positive")
    warm = max(1, int(cfg.warmup_steps * factor))
    lm_warm = max(1, int(cfg.lm_warmup * factor))
    kw = {f"stage{s}_steps": max(warm + 1, int(getattr(cfg, f"stage{s}_steps") * factor)) for s in range(3)}
    return cfg.replace(warmup_steps=warm, lm_warmup=lm_warm, lm_steps=max(lm_warm + 1, int(cfg.lm_steps * factor)),
                       **kw)


def transplant_lm(src, cfg, dst):
    """Write an lm checkpoint for ``cfg``'s architecture holding the shared LM, marker and encoder."""
    shared = load_checkpoint(src)
    model = M.APTModel(cfg)
    keep = {k: v for k, v in shared.items() if k.startswith(("lm.", "encoder."))}
    model.load_state_tensors(keep, strict=False)
    tensors = dict(model.state_tensors())
    for k in ("meta.stage", "meta.step"):
        if k in shared:
            tensors[k] = shared[k]
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(dst, tensors)


def _ensure_lm(spec, arm_cfg, out, lm_checkpoint, log):
    key = lm_key(arm_cfg)
    dst = P.checkpoint_path(arm_cfg, "lm")
    if lm_checkpoint and key == lm_key(spec.base):
        src = Path(lm_checkpoint)
    else:
        src = Path(out) / "lm" / f"{key}.aptf"
        if not src.exists():
            log(f"[{spec.axis}] pretraining LM {key}")
            tmp = arm_cfg.replace(out_dir=str(Path(out) / "lm" / key))
            P.train(tmp, "lm", log=log)
            src.parent.mkdir(parents=True, exist_ok=True)
            P.checkpoint_path(tmp, "lm").replace(src)
    transplant_lm(src, arm_cfg, dst)
    return key


def evaluate_arm(model, store, test, limit=None):
    out = {}
    pick = (lambda xs: xs[:limit]) if limit else (lambda xs: xs)
    out["AT_token_f1"] = E.evaluate(model, store, pick(test["AT"]), "AT", "token_f1").value
    out["AAC_token_f1"] = E.evaluate(model, store, pick(test["AAC"]), "AAC", "token_f1").value
    out["FSC_em"] = E.evaluate(model, store, pick(test["FSC"]), "FSC").value
    nl = E.evaluate(model, store, pick(test["NLAR"]), "NLAR")
    out["NLAR_em"] = nl.value
    out["NLAR_majority"] = nl.extra["majority"]
    return out


def run_ablation(base, axis, out, scale=1.0, lm_checkpoint=None, eval_limit=None, log=print):
    """Train and evaluate every arm of ``axis``; writes ``<axis>.csv`` and ``<axis>.summary.txt``."""
    out = Path(out)
    base = scaled(base, scale)
    root = Path(base.data_dir) if base.data_dir else out / "data"
    if not (root / "manifests").is_dir():
        dataset.render_dataset(base, root, log=lambda *a: None)
    spec = AblationSpec.for_axis(axis, base.replace(data_dir=str(root)))
    mhash = manifest_hash(root)
    data = P.load_split(root, "train")
    test = P.load_split(root, "test")
    store = None
    rows = []
    for name, _ in spec.arms:
        arm_out = out / spec.axis / name
        cfg = spec.arm_config(name, arm_out)
        row = {"axis": spec.axis, "arm": name, "manifest_hash": manifest_hash(root)}
        if row["manifest_hash"] != mhash:
            raise ConfigError("rendered dataset changed between arms")
        t0 = time.perf_counter()
        try:
            row["lm_key"] = _ensure_lm(spec, cfg, out, lm_checkpoint, log)
            t0 = time.perf_counter()
            if cfg.out.joinpath("metrics.csv").exists():
                cfg.out.joinpath("metrics.csv").unlink()
            stage = spec.arm_stage(name)
            store = store or M.FeatureStore(root, M.APTModel(cfg))
            model, losses = P.train(cfg, stage, data=data, store=store,
                                    log=lambda m: log(f"[{spec.axis}/{name}] {m}"))
            loss = list(losses.values())[-1]
            row["final_loss"] = loss
            row["train_seconds"] = round(time.perf_counter() - t0, 1)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"arm {name} ended with loss {loss}")
            store.model = model
            row.update(evaluate_arm(model, store, test, eval_limit))
            row["status"] = "ok"
        except (TrainingDiverged, FloatingPointError) as e:
            log(f"[{spec.axis}/{name}] failed: {e}")
            row["status"] = "failed"
            row.setdefault("train_seconds", round(time.perf_counter() - t0, 1))
        for c in ("final_loss", *METRIC_COLS, "NLAR_majority"):
            row.setdefault(c, float("nan"))
        rows.append(row)
    deltas = _deltas(spec.axis, rows)
    csv_path, summary_path = write_reports(out, spec.axis, rows, deltas)
    return AblationResult(spec.axis, rows, csv_path, summary_path, deltas)


def _deltas(axis, rows):
    if axis not in EXPECTED:
        return {}
    ref, other, _ = EXPECTED[axis]
    by = {r["arm"]: r for r in rows}
    return {c: float(by[ref][c]) - float(by[other][c]) for c in METRIC_COLS}


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.4f}"
    return str(v)


def write_reports(out, axis, rows, deltas):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in COLUMNS])
    lines = [f"ablation axis: {axis}"]
    for r in rows:
        metrics = " ".join(f"{c}={_fmt(r[c])}" for c in METRIC_COLS)
        lines.append(f"  {r['arm']:14s} {r['status']:6s} loss={_fmt(r['final_loss'])} {metrics}")
    if deltas:
        ref, other, note = EXPECTED[axis]
        lines.append(f"deltas ({ref} minus {other}): " + " ".join(f"{c}={v:+.4f}" for c, v in deltas.items()))
        lines.append(f"expected direction at full scale: {note} (not asserted at this scale)")
        with open(out / f"{axis}.deltas.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("axis", "reference", "other", *METRIC_COLS))
            w.writerow((axis, ref, other, *(_fmt(deltas[c]) for c in METRIC_COLS)))
    summary_path = out / f"{axis}.summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    return csv_path, summary_path


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
