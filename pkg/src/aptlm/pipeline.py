"""Training orchestration across stages: data loading, dependencies, checkpoints, resume."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import audio
from . import curriculum as C
from . import model as M
from .errors import CheckpointError, ConfigError, DependencyError
from .storage import load_checkpoint, read_manifest
from .tasks import TASKS, TaskExample

STAGES = ("lm", 0, 1, 2)
CODE_STAGE = {v: k for k, v in C.STAGE_CODE.items()}


def data_root(cfg):
    return Path(cfg.data_dir) if cfg.data_dir else cfg.out / "data"


def checkpoint_dir(cfg):
    return cfg.out / "checkpoints"


def stage_name(stage):
    return "lm" if stage == "lm" else f"stage{stage}"


def checkpoint_path(cfg, stage, partial=False):
    return checkpoint_dir(cfg) / f"{stage_name(stage)}{'.partial' if partial else ''}.aptf"


def parse_stage(s):
    s = str(s)
    if s in ("lm", "all", "single"):
        return s
    if s in ("0", "1", "2"):
        return int(s)
    raise ConfigError(f"unknown stage {s!r}")


def stage_sequence(cfg):
    """Stages run by ``--stage all``; the linear aligner has no text path, so it skips stage 0."""
    return ("lm", 1, 2) if cfg.aligner_arch == "linear" else STAGES


def predecessor(cfg, stage):
    seq = list(stage_sequence(cfg))
    if stage == "single":
        return "lm"
    if stage not in seq:
        raise ConfigError(f"stage {stage} is not part of the {cfg.aligner_arch} curriculum")
    i = seq.index(stage)
    return seq[i - 1] if i else None


def load_split(root, split, tasks=TASKS):
    mdir = Path(root) / "manifests" / split
    if not mdir.is_dir():
        raise DependencyError(f"no rendered manifests at {mdir}; run `aptlm render` first")
    out = {}
    for t in tasks:
        p = mdir / f"{t}.jsonl"
        if not p.exists():
            raise DependencyError(f"missing manifest {p}")
        out[t] = [TaskExample.from_record(r) for r in read_manifest(p)]
    return out


def load_model(cfg, ckpt=None, strict=True):
    model = M.APTModel(cfg)
    if ckpt is not None:
        model.load_state_tensors(load_checkpoint(ckpt), strict=strict)
    model.lm.freeze(True)
    return model


def stage_configs(cfg, data=None):
    """StageConfig per stage id, including the text-only LM stage and the single-stage ablation arm."""
    sizes = {t: len(v) for t, v in data.items()} if data else None
    plan = {sc.stage: sc for sc in C.build_stage_plan(cfg, sizes)}
    plan["lm"] = C.lm_stage(cfg)
    s2 = plan[2]
    plan["single"] = C.StageConfig(
        stage="single", tasks=s2.tasks, trainable=s2.trainable, steps=cfg.stage1_steps + cfg.stage2_steps,
        base_lr=cfg.stage2_lr, warmup=cfg.warmup_steps, batch_size=cfg.batch_size,
        mix_weights=s2.mix_weights, aligner_scope=s2.aligner_scope)
    return plan


def lm_corpus_sequences(model, cfg):
    from .dataset import lm_corpus
    items, anns = lm_corpus(cfg)
    seqs = {}
    for ex in items:
        # group by clip count so each batch has one sequence length
        seqs.setdefault(f"{ex.task}/{len(ex.audio_refs)}", []).append(M.text_only_sequence(model, ex, anns, cfg.duration))
    return seqs


def _pretrain_encoder(model, store, data, cfg, log):
    refs = sorted({r for exs in data.values() for ex in exs for r in ex.audio_refs})
    store.preload(refs)
    specs = [s for r in refs for s in store.spectrograms(r)]
    for _, p in model.encoder.named_parameters():
        p.requires_grad = True
    trace = audio.pretrain_encoder(model.encoder, specs, cfg.encoder_pretrain_steps, seed=cfg.seed)
    model.encoder.set_trainable(False)
    store.invalidate()
    if trace:
        log(f"encoder pretraining: reconstruction loss {trace[0]:.4f} -> {trace[-1]:.4f}")


def train(cfg, stage="all", resume=None, from_scratch=False, hooks=(), log=print, data=None, store=None):
    """Run ``stage`` ("lm", 0, 1, 2, "single" or "all"); returns (model, {stage: final loss}).

    Each finished stage writes ``checkpoints/<stage>.aptf``; a stage starts from its predecessor's
    checkpoint, which must exist unless ``from_scratch`` is set.  A ``store`` from an earlier run
    with the same seed can be passed in to reuse its cached encoder features.
    """
    stage = parse_stage(stage)
    stages = list(stage_sequence(cfg)) if stage == "all" else [stage]
    if stage == "all" and resume is None and checkpoint_path(cfg, "lm").exists():
        # the pretrained LM is a shared prerequisite; reuse it rather than retrain
        stages.remove("lm")
        log(f"reusing {checkpoint_path(cfg, 'lm')}")
    resume_tensors = None
    if resume is not None:
        resume_tensors = load_checkpoint(resume)
        if "meta.stage" not in resume_tensors:
            raise CheckpointError(f"{resume} carries no training position")
        rs = CODE_STAGE[int(resume_tensors["meta.stage"])]
        if rs not in stages:
            raise ConfigError(f"resume checkpoint is from stage {rs}, not in {stages}")
        stages = stages[stages.index(rs):]

    if data is None:
        data = load_split(data_root(cfg), "train")
    model = M.APTModel(cfg)
    M.check_vocab(model, [ex for exs in data.values() for ex in exs])
    if store is None or cfg.encoder_trainable:
        store = M.FeatureStore(data_root(cfg), model)
    else:
        store.model = model  # frozen encoder: cached features stay valid across models of one seed

    prev = predecessor(cfg, stages[0])
    if resume_tensors is None and prev is not None:
        p = checkpoint_path(cfg, prev)
        if p.exists():
            model.load_state_tensors(load_checkpoint(p))
        elif not from_scratch:
            raise DependencyError(f"stage {stages[0]} needs {p}; train stage {prev} first or pass --from-scratch")
    model.lm.freeze(True)

    plan = stage_configs(cfg, data)
    metrics = cfg.out / "metrics.csv"
    losses = {}
    for st in stages:
        sc = plan[st]
        tr = C.Trainer(model, store, cfg, data, metrics, hooks)
        res = None
        if resume_tensors is not None:
            res, resume_tensors = resume_tensors, None
        elif metrics.exists():
            tr._truncate_metrics(sc.stage, 0)
        if st == "lm":
            if cfg.encoder_pretrain_steps and res is None:
                _pretrain_encoder(model, store, data, cfg, log)
            tr.lm_corpus = lm_corpus_sequences(model, cfg)
            model.lm.freeze(False)
        else:
            store.preload([r for t in sc.tasks for ex in data[t] for r in ex.audio_refs])
        (loss, secs) = C.timed(tr.run, sc, resume=res, checkpoint_path=checkpoint_path(cfg, st, partial=True),
                               checkpoint_every=cfg.checkpoint_every)
        model.lm.freeze(True)
        if "encoder" in sc.trainable:
            store.invalidate()
        tr.save(checkpoint_path(cfg, st), sc, sc.steps, tr.opt)
        partial = checkpoint_path(cfg, st, partial=True)
        if partial.exists():
            partial.unlink()
        losses[st] = loss
        log(f"stage {st}: {sc.steps} steps, final loss {loss:.4f} ({secs:.1f}s)")
    return model, losses


def final_checkpoint(cfg):
    """Latest finished stage checkpoint of the curriculum."""
    for st in reversed(stage_sequence(cfg)):
        p = checkpoint_path(cfg, st)
        if p.exists():
            return p
    raise DependencyError(f"no checkpoints under {checkpoint_dir(cfg)}")


def group_snapshot(model):
    return {g: np.frombuffer(model.group_bytes(g), dtype=np.uint8).copy() for g in M.GROUPS}
