"""Aligner pretraining losses (matching, grounded generation, contrastive) and the LM answer loss."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .aligner import pad_text
from .autograd import IGNORE_INDEX
from .errors import ContractViolation
from .language_model import EOS
from .sequence import assemble_batch


def derangement(n, rng):
    """Permutation with no fixed points (n >= 2)."""
    if n < 2:
        raise ContractViolation("a derangement needs at least 2 items")
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def atm_from_logits(logits, labels):
    """Average per-query logits, then binary cross-entropy. ``logits`` is (B, Q)."""
    return ag.sigmoid_bce(ag.mean(logits, axis=1), np.asarray(labels))


def atm_loss(aligner, feats, texts, rng):
    """Matching loss on B positives plus B derangement negatives."""
    b = len(texts)
    if b < 2:
        raise ContractViolation("matching loss needs a batch of at least 2 (no negative otherwise)")
    perm = derangement(b, rng)
    ids, lens = pad_text(list(texts) + [texts[i] for i in perm])
    f = feats.data if hasattr(feats, "data") else feats
    both = ag.constant(np.concatenate([f, f], axis=0))
    z, _ = aligner.align(both, ids, "bidirectional", lens)
    logits = ag.reshape(aligner.itm_head(z), (2 * b, aligner.cfg.n_query))
    labels = np.concatenate([np.ones(b), np.zeros(b)])
    return atm_from_logits(logits, labels)


def agtg_targets(ids, lens):
    """Input t1..tn predicts t2..tn, EOS; padding is ignored."""
    b, n = ids.shape
    tgt = np.full((b, n), IGNORE_INDEX, dtype=np.int64)
    for i in range(b):
        k = int(lens[i])
        tgt[i, : k - 1] = ids[i, 1:k]
        tgt[i, k - 1] = EOS
    return tgt


def agtg_loss(aligner, feats, texts):
    if any(len(t) == 0 for t in texts):
        raise ContractViolation("grounded generation needs nonempty text")
    ids, lens = pad_text(list(texts))
    _, t = aligner.align(feats, ids, "multimodal-causal", lens)
    tgt = agtg_targets(ids, lens)
    b, n, d = t.shape
    rows = np.nonzero(tgt.reshape(-1) != IGNORE_INDEX)[0]
    h = ag.embedding_lookup(ag.reshape(t, (b * n, d)), rows)
    return ag.cross_entropy(aligner.gen_head(h), tgt.reshape(-1)[rows])


def info_nce(sim, tau):
    """Symmetric InfoNCE over a (B, B) similarity matrix whose diagonal holds the positives."""
    if tau <= 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    b = sim.shape[0]
    logits = ag.scale(sim, 1.0 / tau)
    tgt = np.arange(b)
    a2t = ag.cross_entropy(logits, tgt)
    t2a = ag.cross_entropy(ag.transpose(logits, (1, 0)), tgt)
    return ag.scale(ag.add(a2t, t2a), 0.5)


def atc_similarity(z, t_first):
    """Max over queries of cosine(query output, first-text output): (B, Q, d), (B, d) -> (B, B)."""
    b, q, d = z.shape
    zn = ag.reshape(ag.normalize(z), (b * q, d))
    tn = ag.normalize(t_first)
    s = ag.reshape(ag.matmul(zn, ag.transpose(tn, (1, 0))), (b, q, b))
    return ag.max_(s, axis=1)


def atc_loss(aligner, feats, texts, tau=0.07):
    if tau <= 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    if len(texts) < 2:
        raise ContractViolation("contrastive loss needs a batch of at least 2")
    ids, lens = pad_text(list(texts))
    z, t = aligner.align(feats, ids, "unimodal", lens)
    first = ag.reshape(ag.slice_(t, 0, 1, axis=1), (t.shape[0], t.shape[2]))
    return info_nce(atc_similarity(z, first), tau)


def lm_loss_from_logits(logits, targets):
    targets = np.asarray(targets)
    if not np.any(targets != IGNORE_INDEX):
        raise ContractViolation("loss mask is empty")
    return ag.cross_entropy(logits, targets)


def lm_loss(lm, seqs, flat_prompts=None):
    """Answer-span next-token loss over a batch of InterleavedSequences, mean over masked positions."""
    emb, targets, _ = assemble_batch(seqs, lm, flat_prompts)
    flat = targets.reshape(-1)
    rows = np.nonzero(flat != IGNORE_INDEX)[0]
    if len(rows) == 0:
        raise ContractViolation("loss mask is empty")
    logits = lm.forward(emb, positions=rows)
    return ag.cross_entropy(logits, flat[rows])
