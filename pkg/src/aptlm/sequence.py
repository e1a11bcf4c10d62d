"""LM input construction: prefix and interleaved layouts with answer-only loss masks.

A sequence is kept symbolic as an integer slot array: non-negative slots are
token ids, negative slots ``-(1 + r)`` point at row ``r`` of a flat acoustic
prompt tensor shared by the batch. Materializing a batch is then one gather
from ``[word table; marker; prompt rows]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import IGNORE_INDEX, Tensor
from .errors import ContractViolation
from .language_model import AUDIO, BOS, EOS, PAD


@dataclass
class AcousticPrompt:
    """``n_rows`` consecutive rows of ``source`` starting at ``offset`` (one block per segment)."""

    offset: int
    n_rows: int
    n_query: int
    source: Tensor | None = None
    clip_id: str = ""

    @property
    def n_blocks(self):
        return self.n_rows // self.n_query

    def values(self):
        if self.source is None:
            raise ContractViolation("acoustic prompt has no materialized source tensor")
        return ag.slice_(self.source, self.offset, self.offset + self.n_rows, axis=0)


@dataclass
class SegmentItem:
    kind: str  # "audio" | "text"
    role: str = "context"  # "context" | "answer"
    ids: tuple = ()
    prompt: AcousticPrompt | None = None

    def __post_init__(self):
        if self.role == "answer" and self.kind != "text":
            raise ContractViolation("only text items can carry the answer role")


@dataclass
class InterleavedSequence:
    items: list
    slots: np.ndarray
    targets: np.ndarray
    prompts: list = field(default_factory=list)

    def __len__(self):
        return len(self.slots)

    @property
    def loss_mask(self):
        return self.targets != IGNORE_INDEX

    @property
    def marker_count(self):
        return int(np.sum(self.slots == AUDIO))

    def embeddings(self, lm) -> Tensor:
        """(L, D) embedding sequence for a single sequence."""
        emb, _, _ = assemble_batch([self], lm, _common_source(self.prompts))
        return ag.reshape(emb, emb.shape[1:])


def _common_source(prompts):
    srcs = {id(p.source) for p in prompts}
    if len(srcs) > 1:
        raise ContractViolation("prompts in one batch must share a source tensor")
    return prompts[0].source if prompts else None


def _flatten(items):
    slots = [BOS]
    answer_span = None
    for it in items:
        if it.kind == "audio":
            p = it.prompt
            slots.append(AUDIO)
            slots.extend(-(1 + p.offset + np.arange(p.n_rows)))
        elif it.role == "answer":
            answer_span = (len(slots), len(slots) + len(it.ids) + 1)
            slots.extend(it.ids)
            slots.append(EOS)
        else:
            slots.extend(it.ids)
    slots = np.asarray(slots, dtype=np.int64)
    targets = np.full(len(slots), IGNORE_INDEX, dtype=np.int64)
    if answer_span is not None:
        a, b = answer_span
        targets[a - 1 : b - 1] = slots[a:b]
    return slots, targets


def build_interleaved(pairs, answer=None, training=True):
    """``pairs`` is a list of (AcousticPrompt, text ids); the answer goes last.

    With ``training=False`` and no answer, the sequence ends after the last text
    so it can be used as a generation prefix.
    """
    if not pairs:
        raise ContractViolation("interleaved sequence needs at least one (audio, text) pair")
    answer = list(answer or [])
    if training and not answer:
        raise ContractViolation("training sequence needs a nonempty answer")
    items = []
    for prompt, text in pairs:
        items.append(SegmentItem("audio", prompt=prompt))
        if text is not None and len(text):
            items.append(SegmentItem("text", ids=tuple(int(t) for t in text)))
    if answer:
        items.append(SegmentItem("text", role="answer", ids=tuple(int(t) for t in answer)))
    slots, targets = _flatten(items)
    return InterleavedSequence(items, slots, targets, [p for p, _ in pairs])


def build_prefix(audio, text, answer=None, training=True):
    return build_interleaved([(audio, text)], answer, training)


def rebuild(items):
    slots, targets = _flatten(items)
    return InterleavedSequence(list(items), slots, targets, [it.prompt for it in items if it.kind == "audio"])


def gather_index(slots, vocab_size):
    """Map slots to rows of ``[word table; marker; prompt rows]``."""
    idx = np.where(slots == AUDIO, vocab_size, slots)
    return np.where(slots < 0, vocab_size + (-slots), idx)


def assemble_batch(seqs, lm, flat_prompts=None):
    """Right-padded (B, L, D) embeddings, (B, L) targets and lengths for a list of sequences."""
    n = max(len(s) for s in seqs)
    slots = np.full((len(seqs), n), PAD, dtype=np.int64)
    targets = np.full((len(seqs), n), IGNORE_INDEX, dtype=np.int64)
    for i, s in enumerate(seqs):
        slots[i, : len(s)] = s.slots
        targets[i, : len(s)] = s.targets
    v = lm.vocab_size
    parts = [lm.embed, lm.audio_marker]
    if flat_prompts is not None:
        parts.append(flat_prompts)
    elif (slots < 0).any():
        raise ContractViolation("sequence references audio rows but no prompt tensor was given")
    table = ag.concat(parts, axis=0)
    emb = ag.embedding_lookup(table, gather_index(slots, v))
    return emb, targets, np.array([len(s) for s in seqs])
