"""Flat key=value run configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = ""  # rendered dataset; empty -> <out_dir>/data

    # data rendering
    duration: float = 10.0
    train_clips: int = 256
    test_clips: int = 128
    examples_per_task: int = 256
    eval_examples_per_task: int = 64
    fsc_episodes: int = 0  # train episodes; 0 -> examples_per_task
    fsc_clips_per_class: int = 6
    fsc_test_clips_per_class: int = 3
    nlar_pairs: int = 128
    nlar_test_pairs: int = 64
    max_events_per_label: int = 3
    lm_corpus_examples: int = 4000
    lm_corpus_mix: str = "FSC=6,QSED=6"  # per-task multiples of the base corpus count

    # front end and encoder
    sample_rate: int = 16000
    n_mels: int = 40
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    grid_mel: int = 8
    grid_time: int = 8
    encoder_pretrain_steps: int = 0
    encoder_trainable: bool = False

    # aligner
    aligner_arch: str = "transformer"  # transformer | linear
    pooling: str = "mean"  # mean | learnable (linear aligner only)
    n_query: int = 32
    aligner_width: int = 64
    aligner_depth: int = 2
    aligner_heads: int = 4
    train_aligner_late: bool = True  # aligner body trainable in stages 1-2

    # language model
    lm_depth: int = 4
    lm_width: int = 64
    lm_heads: int = 4
    lm_max_positions: int = 512
    lm_steps: int = 2000
    lm_lr: float = 2e-3
    lm_batch: int = 32
    lm_warmup: int = 100

    # curriculum
    stage0_steps: int = 2000
    stage1_steps: int = 3000
    stage2_steps: int = 3000
    stage0_lr: float = 1e-3
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 16
    clip_norm: float = 1.0
    tau: float = 0.07
    stage0_tasks: str = "AT,AAC"
    stage1_tasks: str = "AT,AAC,AQA,QSED,TER,SEC"
    stage2_tasks: str = "AT,AAC,AQA,QSED,TER,SEC,FSC,NLAR"
    train_nlar: bool = True  # NLAR ablation: drop it from stage 2
    fsc_ways: int = 4
    fsc_shots: int = 1
    checkpoint_every: int = 0
    eval_batch: int = 32

    extra: dict = field(default_factory=dict, repr=False)

    def corpus_mix(self):
        out = {}
        for part in filter(None, (p.strip() for p in self.lm_corpus_mix.split(","))):
            name, _, mult = part.partition("=")
            try:
                out[name.strip()] = int(mult)
            except ValueError:
                raise ConfigError(f"lm_corpus_mix entry {part!r} is not TASK=int") from None
        return out

    def stage_tasks(self, stage):
        raw = getattr(self, f"stage{stage}_tasks")
        return tuple(t.strip() for t in raw.split(",") if t.strip())

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def dumps(self):
        lines = []
        for f in fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @property
    def out(self):
        return Path(self.out_dir)


def _coerce(name, typ, raw):
    try:
        if typ is bool or typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as {typ}") from None


def parse_config(text, base=None, env=None):
    """Parse key=value lines; '#' starts a comment. ``APT_SEED`` in ``env`` overrides the seed."""
    cfg = base or Config()
    known = {f.name: f.type for f in fields(Config) if f.name != "extra"}
    updates = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        updates[key] = _coerce(key, known[key], raw)
    env = os.environ if env is None else env
    if env.get("APT_SEED"):
        updates["seed"] = _coerce("APT_SEED", "int", env["APT_SEED"])
    cfg = dataclasses.replace(cfg, **updates)
    validate(cfg)
    return cfg


def load_config(path, env=None):
    return parse_config(Path(path).read_text(), env=env)


def validate(cfg):
    if cfg.aligner_arch not in ("transformer", "linear"):
        raise ConfigError(f"aligner_arch must be transformer or linear, got {cfg.aligner_arch!r}")
    if cfg.pooling not in ("mean", "learnable"):
        raise ConfigError(f"pooling must be mean or learnable, got {cfg.pooling!r}")
    if cfg.lm_width != cfg.lm_width // cfg.lm_heads * cfg.lm_heads:
        raise ConfigError("lm_width must divide by lm_heads")
    for s in range(3):
        steps = getattr(cfg, f"stage{s}_steps")
        if steps and steps <= cfg.warmup_steps:
            raise ConfigError(f"stage{s}_steps ({steps}) must exceed warmup_steps ({cfg.warmup_steps})")
    if cfg.lm_steps and cfg.lm_steps <= cfg.lm_warmup:
        raise ConfigError(f"lm_steps ({cfg.lm_steps}) must exceed lm_warmup ({cfg.lm_warmup})")
    cfg.corpus_mix()
    if cfg.tau <= 0:
        raise ConfigError("tau must be positive")
    return cfg


# A configuration small enough to run every stage on one CPU core in a few minutes.
SMOKE = """\
train_clips=384
test_clips=64
examples_per_task=512
eval_examples_per_task=48
fsc_episodes=2048
fsc_clips_per_class=32
fsc_test_clips_per_class=3
nlar_pairs=96
nlar_test_pairs=48
lm_corpus_examples=3000
lm_steps=2000
lm_batch=32
lm_lr=3e-3
stage0_steps=1000
stage1_steps=1200
stage2_steps=900
stage0_lr=2e-3
stage1_lr=2e-3
stage2_lr=2e-3
warmup_steps=30
lm_warmup=50
batch_size=16
"""


def smoke_config(**overrides):
    cfg = parse_config(SMOKE, env={})
    return validate(dataclasses.replace(cfg, **overrides))
