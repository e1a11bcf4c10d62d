"""Tokenizer, vocabulary and the small causal decoder that stands in for the frozen LLM."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ontology, templates
from .autograd import Tensor
from .errors import ContractViolation, SequenceLengthError
from .nn import Block, LayerNorm, Linear, Module, new_param, sinusoidal_positions

PAD, BOS, EOS, UNK, AUDIO = 0, 1, 2, 3, 4
SPECIALS = ("<PAD>", "<BOS>", "<EOS>", "<UNK>", "[AUDIO]")

_TOKEN_RE = re.compile(r"\d+\.\d+s|\d+|[a-z]+(?:'[a-z]+)*|[^\sa-z0-9]")
_GLUE_LEFT = set(",.?!;:")


def split_words(text: str) -> list:
    text = text.lower().replace("’", "'")
    return _TOKEN_RE.findall(text)


def join_words(words) -> str:
    out = ""
    for i, w in enumerate(words):
        if i == 0:
            out = w
        elif w in _GLUE_LEFT or w == "-" or words[i - 1] == "-":
            out += w
        else:
            out += " " + w
    return out


def normalize_text(text: str) -> str:
    return join_words(split_words(text))


def timestamp(t: float) -> str:
    return f"{t:.1f}s"


class Vocabulary:
    def __init__(self, words):
        words = sorted(set(words) - set(SPECIALS))
        self.itos = list(SPECIALS) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def tokenize(self, text: str) -> list:
        return [self.stoi.get(w, UNK) for w in split_words(text)]

    def detokenize(self, ids) -> str:
        return join_words([self.itos[i] for i in ids if i >= len(SPECIALS)])

    def word(self, i):
        return self.itos[i]


def corpus_words():
    words = set()
    for t in templates.all_template_text():
        words.update(split_words(re.sub(r"\{[A-Z0-9]+\}", " ", t)))
    for c in ontology.CLASSES:
        words.update(split_words(c.label))
        words.update(split_words(c.descriptor))
    words.update(split_words(ontology.THROUGHOUT))
    words.update(templates.CAPTION_WORDS)
    words.update(templates.ANSWER_WORDS)
    words.update(str(n) for n in range(templates.MAX_NUMBER + 1))
    n_steps = int(round(templates.MAX_TIME / templates.TIME_STEP))
    words.update(timestamp(i * templates.TIME_STEP) for i in range(n_steps + 1))
    words.add("-")
    return words


_DEFAULT = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Vocabulary(corpus_words())
    return _DEFAULT


@dataclass
class DecoderConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    max_positions: int = 512
    frozen: bool = True
    ff_mult: int = 4


class LanguageModel(Module):
    """Causal decoder with its word-embedding table and the learnable [AUDIO] marker.

    The marker lives outside the table so it can train while the table is frozen.
    """

    def __init__(self, cfg: DecoderConfig, vocab_size: int, rng):
        d = cfg.width
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = new_param(rng.normal(0.0, 1.0, (vocab_size, d)))
        self.blocks = [Block(d, cfg.heads, rng, cfg.ff_mult) for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, vocab_size, rng)
        self.audio_marker = new_param(rng.normal(0.0, 1.0, (1, d)))
        self._pos = sinusoidal_positions(cfg.max_positions, d)
        self.freeze(cfg.frozen)

    def lm_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n != "audio_marker"]

    def freeze(self, flag=True):
        for _, p in self.lm_parameters():
            p.requires_grad = not flag
        self.cfg.frozen = flag

    def embedding_table(self) -> Tensor:
        """Word table with the marker appended; index ``vocab_size`` is [AUDIO]."""
        return ag.concat([self.embed, self.audio_marker], axis=0)

    def table_index(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ContractViolation(f"token id out of range [0, {self.vocab_size})")
        return np.where(ids == AUDIO, self.vocab_size, ids)

    def embed_tokens(self, ids) -> Tensor:
        return ag.embedding_lookup(self.embedding_table(), self.table_index(ids))

    def hidden(self, emb: Tensor) -> Tensor:
        """Final normed hidden states for (B, L, D) input embeddings."""
        b, n, d = emb.shape
        if n > self.cfg.max_positions:
            raise SequenceLengthError(f"sequence length {n} exceeds max positions {self.cfg.max_positions}")
        pos = np.broadcast_to(self._pos[:n].astype(emb.data.dtype), (b, n, d))
        x = ag.add(emb, ag.constant(np.ascontiguousarray(pos)))
        mask = np.tril(np.ones((n, n), dtype=bool))
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln_f(x)

    def forward(self, emb: Tensor, positions=None) -> Tensor:
        """Next-token logits.

        Without ``positions`` returns (B, L, V); with flat indices into B*L
        returns logits only for those rows, shape (len(positions), V).
        """
        h = self.hidden(emb)
        if positions is None:
            return self.head(h)
        b, n, d = h.shape
        rows = ag.embedding_lookup(ag.reshape(h, (b * n, d)), np.asarray(positions, dtype=np.int64))
        return self.head(rows)

    __call__ = forward

    def greedy_generate(self, prefix, max_new_tokens):
        return self.greedy_generate_batch([prefix], max_new_tokens)[0]

    def greedy_generate_batch(self, prefixes, max_new_tokens):
        """Argmax decoding for a list of (L_i, D) prefix embeddings; lowest id wins ties."""
        seqs = [np.asarray(p.data if isinstance(p, Tensor) else p) for p in prefixes]
        if any(len(s) == 0 for s in seqs):
            raise ContractViolation("greedy_generate needs a nonempty prefix")
        table = self.embedding_table().data
        outs = [[] for _ in seqs]
        active = list(range(len(seqs)))
        with ag.no_grad():
            for _ in range(max_new_tokens):
                if not active:
                    break
                longest = max(len(seqs[i]) for i in active)
                if longest > self.cfg.max_positions:
                    break
                batch = np.zeros((len(active), longest, table.shape[1]), dtype=table.dtype)
                last = []
                for r, i in enumerate(active):
                    batch[r, : len(seqs[i])] = seqs[i]
                    last.append(r * longest + len(seqs[i]) - 1)
                logits = self.forward(ag.constant(batch), positions=last).data
                nxt = np.argmax(logits, axis=-1)
                still = []
                for r, i in enumerate(active):
                    tok = int(nxt[r])
                    if tok == EOS:
                        continue
                    outs[i].append(tok)
                    vec = table[self.vocab_size if tok == AUDIO else tok]
                    seqs[i] = np.concatenate([seqs[i], vec[None]], axis=0)
                    still.append(i)
                active = still
        return outs
