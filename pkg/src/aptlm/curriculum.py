"""Staged training: LM pretraining, aligner alignment (stage 0), single-clip (1) and multi-clip (2) tasks."""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import model as M
from .errors import ConfigError, TrainingDiverged
from .optim import Adam, lr_at
from .storage import METRIC_COLUMNS, MetricsLog, load_checkpoint, read_metrics, save_checkpoint
from .tasks import TASKS

# which tasks each stage may train on
STAGE_TASKS = {
    0: ("AT", "AAC"),
    1: ("AT", "AAC", "AQA", "QSED", "TER", "SEC"),
    2: ("AT", "AAC", "AQA", "QSED", "TER", "SEC", "FSC", "NLAR"),
}
STAGE_CODE = {"lm": 9, 0: 0, 1: 1, 2: 2, "single": 5}


@dataclass
class StageConfig:
    stage: object  # "lm" | 0 | 1 | 2 | "single"
    tasks: tuple
    trainable: tuple
    steps: int
    base_lr: float
    warmup: int
    batch_size: int
    objective: str = "lm"  # "lm" | "triplet"
    mix_weights: dict = field(default_factory=dict)
    aligner_scope: str = "all"  # "all" | "proj"

    def __post_init__(self):
        if "lm" in self.trainable and self.stage != "lm":
            raise ConfigError("the language model is never trainable in the curriculum")
        if self.stage == 0 and "encoder" in self.trainable:
            raise ConfigError("the encoder stays frozen during alignment")


def build_stage_plan(cfg, manifest_sizes=None):
    """Three StageConfigs following STAGE_TASKS; rejects tasks placed in a stage that lacks them."""
    plan = []
    for s in (0, 1, 2):
        tasks = cfg.stage_tasks(s)
        unknown = [t for t in tasks if t not in TASKS]
        if unknown:
            raise ConfigError(f"stage {s}: unknown tasks {unknown}")
        bad = [t for t in tasks if t not in STAGE_TASKS[s]]
        if bad:
            raise ConfigError(f"stage {s}: tasks {bad} are not trained in this stage")
        expected = set(STAGE_TASKS[s])
        if s == 2 and not cfg.train_nlar:
            expected.discard("NLAR")
        if "NLAR" in tasks and not cfg.train_nlar:
            raise ConfigError("train_nlar=false but stage2_tasks lists NLAR")
        if set(tasks) != expected:
            missing = sorted(expected - set(tasks))
            raise ConfigError(f"stage {s}: missing tasks {missing}")
        if s == 0:
            trainable = ("aligner",)
        else:
            trainable = ("aligner", "audio-marker") + (("encoder",) if cfg.encoder_trainable else ())
        # empty weights -> the trainer mixes proportionally to the loaded data sizes
        tasks = tuple(t for t in STAGE_TASKS[s] if t in expected)
        weights = {t: float(manifest_sizes[t]) for t in tasks} if manifest_sizes else {}
        plan.append(StageConfig(
            stage=s, tasks=tasks, trainable=trainable,
            steps=getattr(cfg, f"stage{s}_steps"), base_lr=getattr(cfg, f"stage{s}_lr"),
            warmup=cfg.warmup_steps, batch_size=cfg.batch_size,
            objective="triplet" if s == 0 else "lm", mix_weights=weights,
            aligner_scope="all" if (s == 0 or cfg.train_aligner_late) else "proj",
        ))
    return plan


def task_schedule(weights, steps):
    """Smooth weighted round-robin: deterministic task per step, proportional to weights."""
    names = sorted(weights)
    w = np.array([weights[n] for n in names], dtype=np.float64)
    if np.any(w <= 0):
        raise ConfigError("task-mix weights must be positive")
    cur = np.zeros(len(names))
    out = []
    for _ in range(steps):
        cur += w
        k = int(np.argmax(cur))
        cur[k] -= w.sum()
        out.append(names[k])
    return out


class BatchSampler:
    """Example indices for the k-th batch of a task: a stream of seeded per-epoch permutations."""

    def __init__(self, seed, stage, sizes, batch_size):
        self.seed, self.stage, self.sizes, self.b = seed, STAGE_CODE[stage], sizes, batch_size
        self._perm = {}

    def _perm_for(self, task, epoch):
        key = (task, epoch)
        if key not in self._perm:
            t = TASKS.index(task) if task in TASKS else zlib.crc32(task.encode())
            self._perm[key] = np.random.default_rng([self.seed, self.stage, t, epoch]).permutation(self.sizes[task])
        return self._perm[key]

    def indices(self, task, k):
        n = self.sizes[task]
        b = min(self.b, n)
        out = []
        for pos in range(k * b, (k + 1) * b):
            out.append(int(self._perm_for(task, pos // n)[pos % n]))
        return out


def _group_norms(model):
    norms = {}
    for g, params in model.groups().items():
        tot = 0.0
        for _, p in params:
            if p.grad is not None:
                tot += float(np.sum(p.grad.astype(np.float64) ** 2))
        norms[g] = math.sqrt(tot)
    return norms


def trainable_params(model, sc: StageConfig):
    out = {}
    for g, params in model.groups().items():
        if g not in sc.trainable:
            continue
        for n, p in params:
            if g == "aligner" and sc.aligner_scope == "proj" and not n.startswith("aligner.proj."):
                continue
            out[n] = p
    return out


class Trainer:
    """Runs one stage: gathers batches, steps Adam over the stage's trainable groups, logs metrics."""

    def __init__(self, model, store, cfg, data, metrics_path=None, hooks=(), lm_corpus=None):
        self.model, self.store, self.cfg = model, store, cfg
        self.data = data  # {task: [TaskExample]}
        self.metrics = MetricsLog(metrics_path) if metrics_path else None
        self.hooks = list(hooks)
        self.lm_corpus = lm_corpus  # {task: [InterleavedSequence]} for the "lm" stage
        self.last_loss = None

    def _set_trainable(self, sc):
        params = trainable_params(self.model, sc)
        for _, p in self.model.named_parameters():
            p.requires_grad = False
        for p in params.values():
            p.requires_grad = True
        return params

    def run(self, sc: StageConfig, resume=None, checkpoint_path=None, checkpoint_every=0, stop_at=None):
        """Train ``sc``; ``resume`` is a checkpoint tensor dict to continue from. Returns the last loss."""
        params = self._set_trainable(sc)
        opt = Adam(params, clip_norm=self.cfg.clip_norm)
        start = 0
        if resume is not None:
            self.model.load_state_tensors(resume)
            opt.load_state_tensors(resume)
            start = int(resume["meta.step"])
            if self.metrics:
                self._truncate_metrics(sc.stage, start)
        if sc.stage == "lm":
            sizes = {t: len(v) for t, v in self.lm_corpus.items()}
            weights = {t: float(n) for t, n in sizes.items()}
        else:
            sizes = {t: len(self.data[t]) for t in sc.tasks}
            weights = {t: sc.mix_weights.get(t, float(sizes[t])) for t in sc.tasks}
        if any(n == 0 for n in sizes.values()):
            raise ConfigError(f"stage {sc.stage}: empty task data {sizes}")
        sched = task_schedule(weights, sc.steps)
        counts = {}
        ks = []
        for t in sched:
            ks.append(counts.get(t, 0))
            counts[t] = ks[-1] + 1
        sampler = BatchSampler(self.cfg.seed, sc.stage, sizes, sc.batch_size)
        end = sc.steps if stop_at is None else min(stop_at, sc.steps)
        loss_val = self.last_loss
        for step in range(start, end):
            task = sched[step]
            idx = sampler.indices(task, ks[step])
            rng = np.random.default_rng([self.cfg.seed, STAGE_CODE[sc.stage], step])
            row = {"step": step, "stage": sc.stage, "task": task}
            ag.reset_tape()
            if sc.stage == "lm":
                from .objectives import lm_loss
                loss = lm_loss(self.model.lm, [self.lm_corpus[task][i] for i in idx])
            elif sc.objective == "triplet":
                atm, agtg, atc = M.stage0_losses(self.model, self.store, [self.data[task][i] for i in idx],
                                                 rng, self.cfg.tau)
                loss = ag.add(ag.add(atm, agtg), atc)
                row.update(loss_atm=float(atm.data), loss_agtg=float(agtg.data), loss_atc=float(atc.data))
            else:
                loss = M.lm_batch_loss(self.model, self.store, [self.data[task][i] for i in idx])
            loss_val = float(loss.data)
            row["loss"] = loss_val
            if not np.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite loss at stage {sc.stage} step {step}",
                                       snapshot={"row": row, "examples": idx})
            ag.backward(loss)
            row.update({f"gn_{g.replace('-', '_')}": v for g, v in _group_norms(self.model).items()})
            lr = lr_at(step, sc.base_lr, sc.warmup, sc.steps)
            row["lr"] = lr
            opt.step(lr)
            opt.zero_grad()
            for _, p in self.model.named_parameters():
                p.grad = None
            if self.metrics:
                self.metrics.append(row)
            for h in self.hooks:
                h(self, sc, row)
            if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0 and step + 1 < end:
                self.save(checkpoint_path, sc, step + 1, opt)
        self.last_loss = loss_val
        self.opt = opt
        return loss_val

    def save(self, path, sc, step, opt=None):
        tensors = dict(self.model.state_tensors())
        if opt is not None:
            tensors.update(opt.state_tensors())
        tensors["meta.stage"] = np.asarray(STAGE_CODE[sc.stage], dtype=np.float32)
        tensors["meta.step"] = np.asarray(step, dtype=np.float32)
        save_checkpoint(path, tensors)

    def _truncate_metrics(self, stage, step):
        rows = read_metrics(self.metrics.path)
        keep = [r for r in rows if not (r["stage"] == str(stage) and int(r["step"]) >= step)]
        with open(self.metrics.path, "w", newline="") as fh:
            import csv
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in keep:
                w.writerow([r[c] for c in METRIC_COLUMNS])


def lm_stage(cfg):
    return StageConfig(stage="lm", tasks=("LM",), trainable=("lm", "audio-marker"), steps=cfg.lm_steps,
                       base_lr=cfg.lm_lr, warmup=cfg.lm_warmup, batch_size=cfg.lm_batch)


def timed(fn, *a, **kw):
    t = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t
