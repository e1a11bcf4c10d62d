"""Renders the synthetic dataset tree: WAV clips with sidecars plus per-task JSONL manifests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import audio, ontology, tasks, templates
from .errors import UnsupportedAnnotation
from .storage import write_manifest

SPLITS = ("train", "test")
_SPLIT_CODE = {"train": 1, "test": 2, "corpus": 3}


def plan_general(rng, duration, max_events):
    """Mixture clip: one or two countable classes, sometimes a continuous background."""
    n_count = int(rng.integers(1, 3))
    labels = list(rng.choice(ontology.COUNTABLE, n_count, replace=False))
    if rng.random() < 0.4:
        labels.append(str(rng.choice(ontology.CONTINUOUS)))
    counts = {lb: int(rng.integers(1, max_events + 1)) for lb in labels}
    return audio.sample_events(rng, duration, [str(lb) for lb in labels], counts)


def plan_single(rng, label, duration, max_events):
    """Clip holding only ``label`` (used by few-shot pools)."""
    return audio.sample_events(rng, duration, [label], {label: int(rng.integers(1, max_events + 1))})


def _rng(cfg, split, kind, i):
    return np.random.default_rng([cfg.seed, _SPLIT_CODE[split], kind, i])


def _seed(cfg, split, kind, i):
    return int(_rng(cfg, split, kind, i).integers(2**31))


def clip_plans(cfg, split):
    """Deterministic event plans: (ref, events) for mixture clips and the few-shot pool."""
    n = cfg.train_clips if split == "train" else cfg.test_clips
    general = []
    for i in range(n):
        ev = plan_general(_rng(cfg, split, 0, i), cfg.duration, cfg.max_events_per_label)
        general.append((f"audio/{split}/g{i:04d}.wav", audio.annotate(ev, cfg.duration)))
    per_class = cfg.fsc_clips_per_class if split == "train" else cfg.fsc_test_clips_per_class
    pool = {}
    for c, label in enumerate(ontology.LABELS):
        for j in range(per_class):
            ev = plan_single(_rng(cfg, split, 100 + c, j), label, cfg.duration, cfg.max_events_per_label)
            pool.setdefault(label, []).append((f"audio/{split}/s{c:02d}_{j}.wav", audio.annotate(ev, cfg.duration)))
    return general, pool


def render_examples(cfg, split, general, pool, n_examples=None, n_pairs=None, fsc_settings=None, mix=None):
    """TaskExamples for all eight tasks from annotation plans (no audio needed).

    ``fsc_settings`` cycles episodes through several (ways, shots); default is the configured pair.
    ``mix`` multiplies the per-task count of single-clip tasks.
    """
    n_examples = n_examples or (cfg.examples_per_task if split == "train" else cfg.eval_examples_per_task)
    n_pairs = n_pairs or (cfg.nlar_pairs if split == "train" else cfg.nlar_test_pairs)
    mix = mix or {}
    # single-clip tasks draw from mixtures and single-class clips alike
    clips = list(general) + [c for lb in ontology.LABELS for c in pool.get(lb, [])]
    out = {}
    for t_i, task in enumerate(tasks.SINGLE_CLIP_TASKS):
        items = []
        want = n_examples * mix.get(task, 1)
        order = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], 500 + t_i]).permutation(len(clips))
        k = 0
        while len(items) < want and k < 4 * want + len(clips):
            ref, ann = clips[order[k % len(clips)]]
            seed = _seed(cfg, split, 600 + t_i, k)
            k += 1
            try:
                if task == "AQA":
                    ex = tasks.render_aqa(ann, seed, clip_id=ref)
                else:
                    ex = tasks.render_single_clip_task(task, ann, seed=seed, clip_id=ref, duration=cfg.duration)
            except UnsupportedAnnotation:
                continue
            items.append(ex)
        out[task] = items

    refs_pool = {lb: [r for r, _ in c] for lb, c in pool.items()}
    n_fsc = cfg.fsc_episodes if (split != "test" and cfg.fsc_episodes) else n_examples
    settings = fsc_settings or [(cfg.fsc_ways, cfg.fsc_shots)]
    out["FSC"] = []
    for i in range(n_fsc):
        ways, shots = settings[i % len(settings)]
        seed = _seed(cfg, split, 700, i)
        out["FSC"].append(tasks.build_episode(ways, shots, refs_pool, seed=seed).to_example(seed))

    nlar = []
    prng = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], 900])
    for p in range(n_pairs):
        seed = _seed(cfg, split, 800, p)
        for _ in range(200):
            a, b = prng.choice(len(general), 2, replace=False)
            (r1, a1), (r2, a2) = general[a], general[b]
            items = tasks.render_nlar(a1, a2, seed=seed, clips=(r1, r2))
            # keep pairs where every family applies, which includes the order-sensitive one
            if len(items) == len(templates.NLAR_FAMILIES):
                break
        else:
            raise UnsupportedAnnotation("no clip pair supports every reasoning family")
        nlar.extend(item.to_example(seed) for item in items)
    out["NLAR"] = nlar
    return out


def render_dataset(cfg, root=None, log=print):
    """Write ``root/audio``, ``root/manifests/<split>/<TASK>.jsonl`` and the few-shot pools."""
    root = Path(root or (cfg.data_dir or cfg.out / "data"))
    counts = {}
    for split in SPLITS:
        general, pool = clip_plans(cfg, split)
        clips = list(general) + [c for lb in ontology.LABELS for c in pool[lb]]
        for i, (ref, ann) in enumerate(clips):
            seed = int(np.random.default_rng([cfg.seed, _SPLIT_CODE[split], 7, i]).integers(2**31))
            clip = audio.synthesize_clip(ann, cfg.duration, seed, cfg.sample_rate, clip_id=ref)
            audio.write_wav(root / ref, clip)
        examples = render_examples(cfg, split, general, pool)
        for task, items in examples.items():
            write_manifest(root / "manifests" / split / f"{task}.jsonl", [e.to_record() for e in items])
            counts[(split, task)] = len(items)
        pool_refs = {lb: [r for r, _ in c] for lb, c in pool.items()}
        (root / "manifests" / split / "fsc_pool.json").write_text(json.dumps(pool_refs, sort_keys=True) + "\n")
    for (split, task), n in sorted(counts.items()):
        log(f"{split:5s} {task:4s} {n}")
    return root, counts


# episode shapes seen by the text-only LM, so it reads the query rather than a fixed layout
LM_FSC_SETTINGS = ((2, 1), (3, 1), (4, 1), (5, 1), (6, 1), (2, 2), (3, 2))


def lm_corpus(cfg, n=None):
    """Text-only (TaskExample, {ref: annotation}) pairs from fresh plans, for LM pretraining."""
    n = n or cfg.lm_corpus_examples
    sub = cfg.replace(train_clips=max(64, n // 8), fsc_clips_per_class=40, fsc_episodes=0)
    general, pool = _corpus_plans(sub)
    per_task = max(1, n // len(tasks.TASKS))
    mix = cfg.corpus_mix()
    sub = sub.replace(fsc_episodes=mix.get("FSC", 1) * per_task)
    ex = render_examples(sub, "corpus", general, pool, n_examples=per_task, n_pairs=max(1, per_task // 4),
                         fsc_settings=LM_FSC_SETTINGS, mix=mix)
    anns = {r: a for r, a in general}
    anns.update({r: a for clips in pool.values() for r, a in clips})
    items = [e for t in tasks.TASKS for e in ex[t]]
    return items, anns


def _corpus_plans(cfg):
    general = []
    for i in range(cfg.train_clips):
        ev = plan_general(_rng(cfg, "corpus", 0, i), cfg.duration, cfg.max_events_per_label)
        general.append((f"corpus/g{i:05d}", audio.annotate(ev, cfg.duration)))
    pool = {}
    for c, label in enumerate(ontology.LABELS):
        for j in range(cfg.fsc_clips_per_class):
            ev = plan_single(_rng(cfg, "corpus", 100 + c, j), label, cfg.duration, cfg.max_events_per_label)
            pool.setdefault(label, []).append((f"corpus/s{c:02d}_{j}", audio.annotate(ev, cfg.duration)))
    return general, pool
