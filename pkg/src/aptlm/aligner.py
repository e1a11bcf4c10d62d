"""Query-token aligner: resamples an encoder feature map into a fixed block of prompt vectors.

Queries and instruction text share a self-attention stream whose visibility is
set by the mask mode; only the query rows cross-attend into the audio features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractViolation, EmptyConditioningError
from .language_model import PAD
from .nn import Attention, FeedForward, LayerNorm, Linear, Module, new_param, sinusoidal_positions

MODES = ("bidirectional", "multimodal-causal", "unimodal", "inference")


def build_mask(mode, n_query, n_text):
    """Boolean (n_query+n_text)^2 visibility matrix, True where row may attend to column.

    In unimodal mode the text rows see the whole text span (not just a causal
    prefix) so that the first text position summarizes the sentence.
    """
    if mode not in MODES:
        raise ContractViolation(f"unknown mask mode {mode!r}")
    if n_query <= 0 or n_text < 0:
        raise ContractViolation("mask needs n_query > 0 and n_text >= 0")
    n = n_query + n_text
    if mode in ("bidirectional", "inference"):
        return np.ones((n, n), dtype=bool)
    m = np.zeros((n, n), dtype=bool)
    m[:n_query, :n_query] = True
    if mode == "multimodal-causal":
        m[n_query:, :n_query] = True
        m[n_query:, n_query:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    else:
        m[n_query:, n_query:] = True
    return m


@dataclass
class AlignerConfig:
    n_query: int = 32
    width: int = 64
    depth: int = 2
    heads: int = 4
    feature_dim: int = 64
    lm_width: int = 64
    max_text: int = 128
    ff_mult: int = 4


class AlignerBlock(Module):
    def __init__(self, dim, heads, feature_dim, rng, ff_mult=4):
        self.ln_sa = LayerNorm(dim)
        self.self_attn = Attention(dim, heads, rng)
        self.ln_ca = LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, rng, kv_dim=feature_dim)
        self.ln_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)

    def __call__(self, x, feats, n_query, mask):
        x = ag.add(x, self.self_attn(self.ln_sa(x), mask=mask))
        q = ag.slice_(x, 0, n_query, axis=1)
        q = ag.add(q, self.cross_attn(self.ln_ca(q), context=feats))
        if x.shape[1] > n_query:
            x = ag.concat([q, ag.slice_(x, n_query, x.shape[1], axis=1)], axis=1)
        else:
            x = q
        return ag.add(x, self.ff(self.ln_ff(x)))


def pad_text(seqs, pad=PAD):
    """Right-pad a list of id lists into (B, n) ids and lengths."""
    n = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, np.array([len(s) for s in seqs], dtype=np.int64)


class Aligner(Module):
    def __init__(self, cfg: AlignerConfig, vocab_size, rng):
        d = cfg.width
        self.cfg = cfg
        self.queries = new_param(rng.normal(0.0, 1.0, (cfg.n_query, d)))
        self.text_embed = new_param(rng.normal(0.0, 1.0, (vocab_size, d)))
        self.ln_feat = LayerNorm(cfg.feature_dim)
        self.blocks = [AlignerBlock(d, cfg.heads, cfg.feature_dim, rng, cfg.ff_mult) for _ in range(cfg.depth)]
        self.ln_out = LayerNorm(d)
        self.proj = Linear(d, cfg.lm_width, rng)
        self.itm_head = Linear(d, 1, rng)
        self.gen_head = Linear(d, vocab_size, rng)
        self._pos = sinusoidal_positions(cfg.max_text, d)

    def _text_input(self, ids):
        b, n = ids.shape
        if n > self.cfg.max_text:
            raise ContractViolation(f"aligner text length {n} exceeds {self.cfg.max_text}")
        emb = ag.embedding_lookup(self.text_embed, ids)
        pos = np.ascontiguousarray(np.broadcast_to(self._pos[:n], (b, n, self.cfg.width)))
        return ag.add(emb, ag.constant(pos.astype(emb.data.dtype)))

    def align(self, features, text_ids, mode="inference", lengths=None):
        """Run the blocks; returns (Z (B, Q, width), text outputs (B, n_text, width)).

        ``features`` is (B, T, F); ``text_ids`` is (B, n) padded ids or a list of id lists.
        In inference mode Z is additionally projected to the LM width.
        """
        if isinstance(text_ids, list):
            text_ids, lengths = pad_text(text_ids)
        text_ids = np.asarray(text_ids, dtype=np.int64)
        if text_ids.ndim == 1:
            text_ids = text_ids[None]
        feats = features if isinstance(features, Tensor) else ag.constant(features)
        if feats.ndim == 2:
            feats = ag.reshape(feats, (1,) + feats.shape)
        b = feats.shape[0]
        if text_ids.shape[0] != b:
            raise ContractViolation(f"batch mismatch: features {b} vs text {text_ids.shape[0]}")
        if lengths is None:
            lengths = np.full(b, text_ids.shape[1], dtype=np.int64)
        lengths = np.asarray(lengths)
        if mode != "unimodal" and (text_ids.shape[1] == 0 or lengths.min() == 0):
            raise EmptyConditioningError(f"{mode} mode needs nonempty conditioning text")
        nq, nt = self.cfg.n_query, text_ids.shape[1]

        q = ag.expand(self.queries, b)
        if nt:
            x = ag.concat([q, self._text_input(text_ids)], axis=1)
            valid = np.concatenate([np.ones((b, nq), bool), np.arange(nt)[None] < lengths[:, None]], axis=1)
            mask = build_mask(mode, nq, nt)[None] & valid[:, None, :]
        else:
            x, mask = q, build_mask(mode, nq, 0)
        feats = self.ln_feat(feats)
        for blk in self.blocks:
            x = blk(x, feats, nq, mask)
        x = self.ln_out(x)
        z = ag.slice_(x, 0, nq, axis=1)
        text_out = ag.slice_(x, nq, nq + nt, axis=1)
        if mode == "inference":
            z = self.proj(z)
        return z, text_out

    def prompt_block(self, features, text_ids, lengths=None):
        """Acoustic prompt vectors (B, Q, lm_width) for inference/LM training."""
        return self.align(features, text_ids, "inference", lengths)[0]

    def encode_text(self, text_ids, lengths=None):
        """Mean-pooled unimodal text representation (B, width); no audio involved."""
        if isinstance(text_ids, list):
            text_ids, lengths = pad_text(text_ids)
        text_ids = np.asarray(text_ids, dtype=np.int64)
        b, nt = text_ids.shape
        if lengths is None:
            lengths = np.full(b, nt)
        if nt == 0 or np.min(lengths) == 0:
            raise EmptyConditioningError("cannot embed empty text")
        zero = np.zeros((b, 1, self.cfg.feature_dim), dtype=self.queries.data.dtype)
        _, t = self.align(zero, text_ids, "unimodal", lengths)
        w = (np.arange(nt)[None] < np.asarray(lengths)[:, None]).astype(t.data.dtype)
        w = w / w.sum(axis=1, keepdims=True)
        return ag.sum_(ag.mul(t, ag.constant(np.repeat(w[:, :, None], t.shape[2], axis=2))), axis=1)


class LinearAligner(Module):
    """Baseline connector: pool the feature map to Q vectors and project linearly.

    ``pooling='mean'`` averages contiguous token groups; ``'learnable'`` flattens
    each group and applies a learned strided projection.
    """

    def __init__(self, cfg: AlignerConfig, n_tokens, rng, pooling="mean"):
        if pooling not in ("mean", "learnable"):
            raise ConfigError(f"unknown pooling {pooling!r}")
        if n_tokens % cfg.n_query:
            raise ConfigError(f"{n_tokens} feature tokens do not split into {cfg.n_query} groups")
        self.cfg = cfg
        self.pooling = pooling
        self.group = n_tokens // cfg.n_query
        n_in = cfg.feature_dim * (self.group if pooling == "learnable" else 1)
        self.proj = Linear(n_in, cfg.lm_width, rng)

    def prompt_block(self, features, text_ids=None, lengths=None):
        feats = features if isinstance(features, Tensor) else ag.constant(features)
        if feats.ndim == 2:
            feats = ag.reshape(feats, (1,) + feats.shape)
        b, t, f = feats.shape
        q = self.cfg.n_query
        if self.pooling == "mean":
            pooled = ag.mean(ag.reshape(feats, (b, q, self.group, f)), axis=2)
        else:
            pooled = ag.reshape(feats, (b, q, self.group * f))
        return self.proj(pooled)
