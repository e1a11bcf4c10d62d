"""Rule-based rendering of the eight tasks from clip annotations.

Annotations are lists of ``EventSpec`` with count tags filled in (see
``audio.synthesize_clip``). Every renderer is a pure function of its inputs
and seed.
"""

from __future__ import annotations

import re
import subprocess
from dataclasses import dataclass, field

import numpy as np

from . import ontology, templates
from .errors import ContractViolation, UnsupportedAnnotation
from .language_model import timestamp
from .ontology import THROUGHOUT

TASKS = ("AT", "AAC", "AQA", "QSED", "TER", "SEC", "FSC", "NLAR")
SINGLE_CLIP_TASKS = ("AT", "AAC", "AQA", "QSED", "TER", "SEC")


@dataclass
class TaskExample:
    task: str
    audio_refs: list
    prompt: str
    target: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractViolation(f"unknown task {self.task!r}")
        multi = self.task in ("FSC", "NLAR")
        if multi and len(self.audio_refs) < 2 or not multi and len(self.audio_refs) != 1:
            raise ContractViolation(f"{self.task} example has {len(self.audio_refs)} audio refs")
        self.meta.setdefault("texts", [self.prompt])
        self.meta.setdefault("order_sensitive", False)

    @property
    def texts(self):
        """Text following each audio ref, in order (the interleaved layout)."""
        return self.meta["texts"]

    def to_record(self):
        return {"task": self.task, "audio_refs": list(self.audio_refs), "prompt": self.prompt,
                "target": self.target, "meta": dict(self.meta)}

    @classmethod
    def from_record(cls, rec):
        return cls(rec["task"], list(rec["audio_refs"]), rec["prompt"], rec["target"], dict(rec.get("meta", {})))


# ---------------------------------------------------------------------------
# annotation helpers


def labels_in_order(ann):
    """Unique labels ordered by first onset, ties by label."""
    first = {}
    for e in ann:
        first[e.label] = min(first.get(e.label, np.inf), e.onset)
    return sorted(first, key=lambda lb: (first[lb], lb))


def event_count(ann, label):
    """Occurrences of ``label``; a continuous event counts once. 0 if absent."""
    evs = [e for e in ann if e.label == label]
    if not evs:
        return 0
    if any(e.throughout for e in evs):
        return 1
    return len(evs)


def is_throughout(ann, label):
    return any(e.label == label and e.throughout for e in ann)


def intervals(ann, label):
    return sorted((e.onset, e.offset) for e in ann if e.label == label)


def count_word(n):
    return {1: "once", 2: "twice"}.get(n, f"{n} times")


def caption(ann):
    """Rule caption, e.g. "dog bark twice and rain throughout"."""
    parts = []
    for lb in labels_in_order(ann):
        parts.append(f"{lb} throughout" if is_throughout(ann, lb) else f"{lb} {count_word(event_count(ann, lb))}")
    if not parts:
        return "silence"
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def describe_clip(ann):
    """Compact structured description: label, count and intervals per event class."""
    parts = []
    for lb in labels_in_order(ann):
        if is_throughout(ann, lb):
            parts.append(f"{lb} throughout")
        else:
            spans = " ".join(f"{timestamp(a)}-{timestamp(b)}" for a, b in intervals(ann, lb))
            parts.append(f"{lb} {event_count(ann, lb)} times {spans}")
    return ", ".join(parts) if parts else "silence"


# ---------------------------------------------------------------------------
# output grammars (used to check every target parses back)

_LABEL_ALT = "|".join(re.escape(lb) for lb in sorted(ontology.LABELS, key=len, reverse=True))


def parse_target(task, target):
    """Parse a target back into structured form; raises ContractViolation if malformed."""
    def fail():
        raise ContractViolation(f"{task} target {target!r} does not match its output grammar")

    if task in ("AT", "TER"):
        if task == "TER" and target == "none":
            return []
        labels = target.split(", ")
        if not labels or any(lb not in ontology.BY_LABEL for lb in labels):
            fail()
        return labels
    if task == "QSED":
        out = []
        for span in target.split(", "):
            m = re.fullmatch(r"(\d+\.\d)s-(\d+\.\d)s", span)
            if not m:
                fail()
            out.append((float(m.group(1)), float(m.group(2))))
        return out
    if task == "SEC":
        if not re.fullmatch(r"\d+", target):
            fail()
        return int(target)
    if task == "AAC":
        if target == "silence":
            return {}
        part = rf"({_LABEL_ALT}) (throughout|once|twice|\d+ times)"
        chunks = re.split(r", | and ", target)
        out = {}
        for c in chunks:
            m = re.fullmatch(part, c)
            if not m:
                fail()
            w = m.group(2)
            out[m.group(1)] = THROUGHOUT if w == "throughout" else {"once": 1, "twice": 2}.get(w) or int(w.split()[0])
        return out
    if task in ("AQA", "NLAR"):
        if target in templates.ANSWER_WORDS or target in ontology.BY_LABEL or re.fullmatch(r"\d+", target):
            return target
        fail()
    if task == "FSC":
        if target not in ontology.BY_LABEL:
            fail()
        return target
    fail()


# ---------------------------------------------------------------------------
# single-clip tasks


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def render_single_clip_task(kind, ann, template_id=None, seed=0, clip_id="clip", label=None, window=None,
                            duration=10.0):
    """Render AT / AAC / QSED / TER / SEC for one annotated clip."""
    if kind not in templates.SINGLE_CLIP:
        raise ContractViolation(f"{kind} is not a single-clip template task")
    rng = np.random.default_rng(seed)
    table = templates.SINGLE_CLIP[kind]
    tid = int(rng.integers(len(table))) if template_id is None else int(template_id)
    if not 0 <= tid < len(table):
        raise ContractViolation(f"{kind} template id {tid} out of range")
    tmpl = table[tid]
    meta = {"template_id": tid, "seed": int(seed)}

    if kind == "AT":
        prompt, target = tmpl, ", ".join(labels_in_order(ann))
        if not target:
            raise UnsupportedAnnotation("tagging needs at least one event")
    elif kind == "AAC":
        prompt, target = tmpl, caption(ann)
    elif kind in ("QSED", "SEC"):
        if label is None:
            countable = [lb for lb in labels_in_order(ann) if not is_throughout(ann, lb)]
            if not countable:
                raise UnsupportedAnnotation(f"{kind} needs a countable event")
            label = _pick(rng, countable)
        if label not in {e.label for e in ann}:
            raise UnsupportedAnnotation(f"{label!r} does not occur in the clip")
        if is_throughout(ann, label):
            raise UnsupportedAnnotation(f"{kind} cannot use {label!r} tagged {THROUGHOUT!r}")
        prompt = tmpl.replace("{LABEL}", label)
        if kind == "SEC":
            target = str(event_count(ann, label))
        else:
            target = ", ".join(f"{timestamp(a)}-{timestamp(b)}" for a, b in intervals(ann, label))
        meta["label"] = label
    else:  # TER
        if window is None:
            last = max(int(np.floor(duration)) - 1, 0)
            stt = int(rng.integers(0, last + 1))
            edt = int(rng.integers(stt + 1, int(np.floor(duration)) + 1))
            window = (stt, edt)
        stt, edt = window
        if stt < 0 or edt <= stt or edt > duration + 1e-9:
            raise ContractViolation(f"window {stt}-{edt}s lies outside the {duration}s clip")
        inside = [lb for lb in labels_in_order(ann)
                  if any(e.label == lb and e.onset < edt and e.offset > stt for e in ann)]
        prompt = tmpl.replace("{STT}", str(stt)).replace("{EDT}", str(edt))
        target = ", ".join(inside) if inside else "none"
        meta["window"] = [stt, edt]
    return TaskExample(kind, [clip_id], prompt, target, meta)


def render_aqa(ann, seed=0, clip_id="clip", family=None):
    """Question answering: presence yes/no, event count, or which event comes first."""
    if not ann:
        raise ContractViolation("question answering needs a nonempty annotation")
    rng = np.random.default_rng(seed)
    present = labels_in_order(ann)
    countable = [lb for lb in present if not is_throughout(ann, lb)]
    onsets = sorted(e.onset for e in ann)
    families = ["presence"]
    if countable:
        families.append("count")
    if len(present) > 1 and onsets[0] < onsets[1]:
        families.append("first")
    if family is None:
        family = _pick(rng, families)
    elif family not in families:
        raise UnsupportedAnnotation(f"question family {family!r} does not apply to this clip")
    tmpl = templates.AQA[family]
    if family == "presence":
        if rng.random() < 0.5:
            label, answer = _pick(rng, present), "yes"
        else:
            absent = [lb for lb in ontology.LABELS if lb not in present]
            label, answer = _pick(rng, absent), "no"
        prompt = tmpl.replace("{LABEL}", label)
    elif family == "count":
        label = _pick(rng, countable)
        prompt, answer = tmpl.replace("{LABEL}", label), str(event_count(ann, label))
    else:
        prompt, answer = tmpl, min(ann, key=lambda e: (e.onset, e.label)).label
    return TaskExample("AQA", [clip_id], prompt, answer, {"template_id": family, "seed": int(seed)})


# ---------------------------------------------------------------------------
# few-shot episodes


@dataclass
class FewShotEpisode:
    ways: int
    shots: int
    support: list  # [(clip_id, label)]
    query: str
    target: str

    def to_example(self, seed=0):
        prompt = templates.FEW_SHOT_PROMPT
        refs = [c for c, _ in self.support] + [self.query]
        texts = [lb for _, lb in self.support] + [prompt]
        return TaskExample("FSC", refs, prompt, self.target,
                           {"template_id": 0, "seed": int(seed), "texts": texts, "ways": self.ways, "shots": self.shots})


def build_episode(ways, shots, pool, seed=0):
    """N-way K-shot episode from ``pool`` = {label: [clip ids]}; support order shuffled."""
    if ways < 1 or shots < 1:
        raise ContractViolation("episode needs ways >= 1 and shots >= 1")
    rng = np.random.default_rng(seed)
    eligible = sorted(lb for lb, clips in pool.items() if len(clips) >= shots + 1)
    if len(eligible) < ways:
        raise ContractViolation(f"pool has {len(eligible)} classes with >= {shots + 1} clips, need {ways}")
    classes = [eligible[i] for i in rng.choice(len(eligible), ways, replace=False)]
    target = classes[int(rng.integers(ways))]
    support = []
    query = None
    for lb in classes:
        picks = rng.choice(len(pool[lb]), shots + (lb == target), replace=False)
        clips = [pool[lb][i] for i in picks]
        if lb == target:
            query = clips.pop()
        support.extend((c, lb) for c in clips)
    order = rng.permutation(len(support))
    return FewShotEpisode(ways, shots, [support[i] for i in order], query, target)


# ---------------------------------------------------------------------------
# reasoning over clip pairs


@dataclass
class NLARItem:
    clips: tuple
    question: str
    answer: str
    family: str
    order_sensitive: bool = False

    def to_example(self, seed=0):
        return TaskExample("NLAR", list(self.clips), self.question, self.answer,
                           {"template_id": self.family, "seed": int(seed), "texts": ["", self.question],
                            "order_sensitive": self.order_sensitive})


class ExternalGenerator:
    """Line protocol to an external text generator: one prompt line in, one completion line out.

    Newlines inside a prompt are sent escaped as ``\\n``.
    """

    def __init__(self, argv):
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)

    def complete(self, prompt):
        self.proc.stdin.write(prompt.replace("\n", "\\n") + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise ContractViolation("external generator closed its output")
        return line.rstrip("\n")

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)


def describe_event(label, generator=None):
    cls = ontology.lookup(label)
    if generator is None:
        return cls.descriptor
    return generator.complete(templates.DESCRIBE_REQUEST.replace("{LABEL}", label)).strip()


def pair_summary(ann1, ann2, generator=None):
    """Per-recording event summary (label, descriptor, count tag), the input to question writing."""
    lines = []
    for name, ann in (("first", ann1), ("second", ann2)):
        lines.append(f"{name}:")
        for lb in labels_in_order(ann):
            tag = THROUGHOUT if is_throughout(ann, lb) else f"{event_count(ann, lb)} times"
            lines.append(f"  {lb} ({describe_event(lb, generator)}) [{tag}]")
    return "\n".join(lines)


def render_nlar(ann1, ann2, seed=0, clips=("first", "second"), labels=None):
    """One item per applicable question family for an ordered clip pair.

    ``labels`` pins the (first-clip, second-clip) label pair used by the label-based families.
    """
    if not any(not e.throughout for e in list(ann1) + list(ann2)):
        raise ContractViolation("reasoning pair needs at least one countable event")
    lab1, lab2 = labels_in_order(ann1), labels_in_order(ann2)
    n1 = sum(event_count(ann1, lb) for lb in lab1)
    n2 = sum(event_count(ann2, lb) for lb in lab2)
    rng = np.random.default_rng(seed)
    items = []

    def add(family, answer, order_sensitive=False, **fields):
        q = templates.NLAR[family]
        for k, v in fields.items():
            q = q.replace("{" + k + "}", str(v))
        items.append(NLARItem(tuple(clips), q, answer, family, order_sensitive))

    pairs = [(a, b) for a in lab1 for b in lab2 if a != b]
    if labels is not None:
        if tuple(labels) not in pairs:
            raise ContractViolation(f"labels {labels} do not occur in the pair")
        pairs = [tuple(labels)]
    if pairs:
        l1, l2 = _pick(rng, pairs)
        t1 = event_count(ann1, l1) + event_count(ann2, l1)
        t2 = event_count(ann1, l2) + event_count(ann2, l2)
        if rng.random() < 0.5:
            add("sum-binary", "yes", A=t1, B=t2, L1=l1, L2=l2)
        else:
            a, b = t1, t2
            if rng.random() < 0.5:
                a = t1 + 1 if t1 == 1 or rng.random() < 0.5 else t1 - 1
            else:
                b = t2 + 1 if t2 == 1 or rng.random() < 0.5 else t2 - 1
            add("sum-binary", "no", A=a, B=b, L1=l1, L2=l2)
        l1, l2 = _pick(rng, pairs)
        add("sum-count", str(event_count(ann1, l1) + event_count(ann2, l1)
                             + event_count(ann1, l2) + event_count(ann2, l2)), L1=l1, L2=l2)
        l1, l2 = _pick(rng, pairs)
        add("comparison-binary", "yes" if event_count(ann1, l1) > event_count(ann2, l2) else "no", L1=l1, L2=l2)

    ord_name = _pick(rng, ("first", "second"))
    ann = ann1 if ord_name == "first" else ann2
    add("qualitative-binary", "yes" if any(e.throughout for e in ann) else "no", ORD=ord_name)

    if n1 != n2:
        add("which-recording", "first" if n1 > n2 else "second", order_sensitive=True)
    return items
