"""Metrics (exact match, mAP, token-F1, cosine classification) and per-task evaluation reports."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import ontology
from .errors import ConfigError, ContractViolation, DependencyError
from .language_model import split_words
from .storage import load_checkpoint
from .tasks import TASKS, TaskExample, build_episode

_TRAILING = ".,!?;:"


def normalize(text):
    """Lowercase, unify apostrophes, collapse whitespace, strip terminal punctuation."""
    t = " ".join(str(text).replace("’", "'").lower().split())
    return t.rstrip(_TRAILING).rstrip()


def exact_match(predictions, targets):
    if len(predictions) != len(targets):
        raise ContractViolation(f"{len(predictions)} predictions vs {len(targets)} targets")
    if not targets:
        return 0.0
    return float(np.mean([normalize(p) == normalize(t) for p, t in zip(predictions, targets)]))


def token_f1(prediction, reference):
    p = Counter(split_words(normalize(prediction)))
    r = Counter(split_words(normalize(reference)))
    if not p and not r:
        return 1.0
    common = sum((p & r).values())
    if common == 0:
        return 0.0
    prec = common / sum(p.values())
    rec = common / sum(r.values())
    return 2 * prec * rec / (prec + rec)


def average_precision(scores, relevant):
    """AP of one ranked list; ties keep item order (stable sort on descending score)."""
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    if not relevant.any():
        raise ContractViolation("average precision needs at least one relevant item")
    order = np.argsort(-scores, kind="stable")
    hits = relevant[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


@dataclass
class MAPResult:
    value: float
    per_class: dict
    excluded: list = field(default_factory=list)

    def __float__(self):
        return self.value


def mean_average_precision(scores, relevance, class_names=None):
    """Unweighted mean of per-class AP over classes that have a relevant item; others are reported."""
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=bool)
    if scores.shape != relevance.shape or scores.ndim != 2:
        raise ContractViolation(f"score matrix {scores.shape} vs relevance {relevance.shape}")
    names = list(class_names) if class_names is not None else list(range(scores.shape[1]))
    per, excluded = {}, []
    for c, name in enumerate(names):
        if relevance[:, c].any():
            per[name] = average_precision(scores[:, c], relevance[:, c])
        else:
            excluded.append(name)
    if not per:
        raise ContractViolation("no class has a relevant item")
    return MAPResult(float(np.mean(list(per.values()))), per, excluded)


# ---------------------------------------------------------------------------
# cosine-similarity classification


def cosine_probabilities(query, classes):
    """Softmax over cosine similarities between one vector and each row of ``classes``."""
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(classes, dtype=np.float64)
    qn = q / max(np.linalg.norm(q), 1e-12)
    cn = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    sim = cn @ qn
    e = np.exp(sim - sim.max())
    return e / e.sum()


class TextEmbedder:
    """Mean-pooled unimodal text path of a stage-0-trained aligner."""

    def __init__(self, model):
        self.model = model
        self._cache = {}

    @classmethod
    def from_checkpoint(cls, cfg, path):
        if path is None or not Path(path).exists():
            raise DependencyError(f"cosine classification needs a stage-0 checkpoint (missing: {path})")
        model = M.APTModel(cfg)
        model.load_state_tensors(load_checkpoint(path))
        return cls(model)

    def __call__(self, texts):
        from . import autograd as ag
        out = []
        with ag.no_grad():
            for t in texts:
                if t not in self._cache:
                    ids = self.model.vocab.tokenize(t)
                    self._cache[t] = self.model.aligner.encode_text([ids]).data[0] if ids else None
                out.append(self._cache[t])
        return out


def cosine_classify(generated, class_names, embedder):
    """Class probabilities for one generated text; ``embedder`` maps a list of texts to vectors."""
    if embedder is None:
        raise DependencyError("cosine classification needs a stage-0 text embedder")
    vecs = embedder([generated] + list(class_names))
    if vecs[0] is None or any(v is None for v in vecs[1:]):
        return np.full(len(class_names), 1.0 / len(class_names))
    return cosine_probabilities(vecs[0], np.stack(vecs[1:]))


# ---------------------------------------------------------------------------
# reports


METRICS = ("exact_match", "token_f1", "map")
DEFAULT_METRIC = {"AT": "map", "AAC": "token_f1"}
ALLOWED = {"map": ("AT",), "token_f1": ("AT", "AAC"), "exact_match": TASKS}


def check_metric(task, metric):
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    metric = metric or DEFAULT_METRIC.get(task, "exact_match")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if task not in ALLOWED[metric]:
        raise ConfigError(f"metric {metric} does not apply to {task}")
    return metric


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    records: list
    extra: dict = field(default_factory=dict)

    @property
    def count(self):
        return len(self.records)

    def summary(self):
        bits = [f"task={self.task}", f"metric={self.metric}", f"value={self.value:.4f}", f"n={self.count}"]
        bits += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        return " ".join(bits)

    def recompute(self):
        """The summary value rebuilt from the per-item records alone."""
        if self.metric == "map":
            labels = list(ontology.LABELS)
            scores = np.array([r["probabilities"] for r in self.records])
            rel = np.array([[lb in r["target"].split(", ") for lb in labels] for r in self.records])
            return mean_average_precision(scores, rel, labels).value
        return float(np.mean([r["score"] for r in self.records])) if self.records else 0.0

    def write(self, directory, stem=None):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.task}_{self.metric}"
        with open(d / f"{stem}.jsonl", "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        (d / f"{stem}.summary.txt").write_text(self.summary() + "\n")
        return d / f"{stem}.jsonl"


def majority_baseline(targets):
    """Accuracy of always answering the most frequent normalized target (ties: alphabetical)."""
    if not targets:
        return 0.0, ""
    counts = Counter(normalize(t) for t in targets)
    best = min(counts, key=lambda k: (-counts[k], k))
    return counts[best] / len(targets), best


def evaluate(model, store, examples, task, metric=None, embedder=None, max_new_tokens=40, batch=32):
    """Greedy-decode every example and score it; returns an EvalReport with per-item records."""
    metric = check_metric(task, metric)
    examples = [ex for ex in examples if ex.task == task]
    if not examples:
        raise ContractViolation(f"no {task} examples to evaluate")
    preds = M.generate_text(model, store, examples, max_new_tokens, batch)
    records = []
    if metric == "map":
        labels = list(ontology.LABELS)
        scores = np.zeros((len(examples), len(labels)))
        rel = np.zeros_like(scores, dtype=bool)
        for i, (p, ex) in enumerate(zip(preds, examples)):
            scores[i] = cosine_classify(p, labels, embedder)
            for lb in ex.target.split(", "):
                rel[i, labels.index(lb)] = True
            records.append({"prediction": p, "target": ex.target, "score": float(scores[i][rel[i]].mean()),
                            "probabilities": [float(x) for x in scores[i]]})
        res = mean_average_precision(scores, rel, labels)
        return EvalReport(task, metric, res.value, records, {"excluded_classes": len(res.excluded)})
    for p, ex in zip(preds, examples):
        s = token_f1(p, ex.target) if metric == "token_f1" else float(normalize(p) == normalize(ex.target))
        records.append({"prediction": p, "target": ex.target, "score": s})
    value = float(np.mean([r["score"] for r in records]))
    extra = {}
    if metric == "exact_match":
        extra["majority"] = round(majority_baseline([ex.target for ex in examples])[0], 4)
    return EvalReport(task, metric, value, records, extra)


def fsc_examples(root, split, ways, shots, n, seed=0):
    """Fresh N-way K-shot episodes over the rendered few-shot pool of ``split``."""
    pool_path = Path(root) / "manifests" / split / "fsc_pool.json"
    if not pool_path.exists():
        raise DependencyError(f"missing few-shot pool {pool_path}")
    pool = json.loads(pool_path.read_text())
    out = []
    for i in range(n):
        s = int(np.random.default_rng([seed, ways, shots, i]).integers(2**31))
        out.append(build_episode(ways, shots, pool, seed=s).to_example(s))
    return out


def swap_order(ex: TaskExample):
    """The same NLAR item with its two clips presented in the opposite order."""
    if ex.task != "NLAR" or len(ex.audio_refs) != 2:
        raise ContractViolation("only two-clip NLAR items can be swapped")
    # these families name a clip position in the question, so their swapped answer needs the annotations
    if ex.meta.get("template_id") in ("qualitative-binary", "comparison-binary"):
        raise ContractViolation(f"{ex.meta['template_id']} items cannot be swapped from text alone")
    flip = {"first": "second", "second": "first"}
    target = flip.get(ex.target, ex.target) if ex.meta.get("order_sensitive") else ex.target
    return TaskExample("NLAR", list(reversed(ex.audio_refs)), ex.prompt, target, dict(ex.meta))
