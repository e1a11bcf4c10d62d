"""Composition of encoder, aligner and language model, plus batch-level forward passes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import audio
from . import autograd as ag
from . import objectives, sequence
from .aligner import Aligner, AlignerConfig, LinearAligner, pad_text
from .audio import AudioEncoder, EncoderConfig, FrontendConfig
from .errors import CheckpointError, ContractViolation
from .language_model import PAD, DecoderConfig, LanguageModel, default_vocabulary
from .tasks import describe_clip

GROUPS = ("encoder", "aligner", "audio-marker", "lm")


def frontend_config(cfg):
    return FrontendConfig(sample_rate=cfg.sample_rate, n_mels=cfg.n_mels)


class APTModel:
    def __init__(self, cfg, vocab=None):
        self.cfg = cfg
        self.vocab = vocab or default_vocabulary()
        ss = np.random.SeedSequence(cfg.seed)
        r_enc, r_al, r_lm = (np.random.default_rng(s) for s in ss.spawn(3))
        self.frontend = frontend_config(cfg)
        enc_cfg = EncoderConfig(cfg.grid_mel, cfg.grid_time, cfg.enc_dim, cfg.enc_depth, cfg.enc_heads)
        self.encoder = AudioEncoder(enc_cfg, self.frontend, r_enc)
        self.encoder.set_trainable(False)
        al_cfg = AlignerConfig(n_query=cfg.n_query, width=cfg.aligner_width, depth=cfg.aligner_depth,
                               heads=cfg.aligner_heads, feature_dim=cfg.enc_dim, lm_width=cfg.lm_width)
        if cfg.aligner_arch == "linear":
            self.aligner = LinearAligner(al_cfg, enc_cfg.tokens, r_al, cfg.pooling)
        else:
            self.aligner = Aligner(al_cfg, len(self.vocab), r_al)
        dec = DecoderConfig(cfg.lm_depth, cfg.lm_width, cfg.lm_heads, cfg.lm_max_positions, frozen=True)
        self.lm = LanguageModel(dec, len(self.vocab), r_lm)
        self.n_query = cfg.n_query

    # -- parameters ----------------------------------------------------------

    def groups(self):
        return {
            "encoder": list(self.encoder.named_parameters("encoder.")),
            "aligner": list(self.aligner.named_parameters("aligner.")),
            "audio-marker": [("lm.audio_marker", self.lm.audio_marker)],
            "lm": [("lm." + n, p) for n, p in self.lm.lm_parameters()],
        }

    def named_parameters(self):
        out = []
        for g in GROUPS:
            out.extend(self.groups()[g])
        return out

    def set_trainable(self, groups):
        for g, params in self.groups().items():
            for _, p in params:
                p.requires_grad = g in groups

    def state_tensors(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_tensors(self, tensors, strict=True):
        for n, p in self.named_parameters():
            if n not in tensors:
                if strict:
                    raise CheckpointError(f"checkpoint lacks tensor {n!r}")
                continue
            if tensors[n].shape != p.data.shape:
                raise CheckpointError(f"{n}: checkpoint shape {tensors[n].shape} vs model {p.data.shape}")
            p.data[...] = tensors[n]

    def group_bytes(self, group):
        return b"".join(np.ascontiguousarray(p.data).tobytes() for _, p in self.groups()[group])

    # -- features ------------------------------------------------------------

    def segments_for(self, duration):
        return max(1, int(np.ceil(duration / self.frontend.segment_seconds - 1e-9)))


class FeatureStore:
    """Per-clip encoder features, computed once from the WAV files and cached in memory."""

    def __init__(self, root, model: APTModel):
        self.root = Path(root)
        self.model = model
        self.cache = {}
        self.specs = {}
        self.annotations = {}

    def load(self, ref):
        if ref not in self.cache:
            self.preload([ref])
        return self.cache[ref]

    def spectrograms(self, ref):
        if ref not in self.specs:
            self.preload([ref])
        return self.specs[ref]

    def preload(self, refs, batch=32):
        todo = sorted({r for r in refs if r not in self.cache})
        for i in range(0, len(todo), batch):
            chunk = todo[i:i + batch]
            clips = [audio.read_wav(self.root / r) for r in chunk]
            specs = [np.stack(audio.clip_spectrograms(c, self.model.frontend)) for c in clips]
            feats = self.model.encoder.features(np.concatenate(specs))
            k = 0
            for r, c, s in zip(chunk, clips, specs):
                self.cache[r] = feats[k:k + len(s)]
                self.specs[r] = s
                self.annotations[r] = c.annotation
                k += len(s)

    def invalidate(self):
        """Drop cached features (after the encoder changed); spectrograms stay valid."""
        self.cache.clear()


# ---------------------------------------------------------------------------
# batch forward passes


def conditioning_ids(model, ex):
    ids = model.vocab.tokenize(ex.prompt)
    return ids or model.vocab.tokenize(ex.target)


def acoustic_prompts(model, store, examples):
    """Run the aligner once over every segment in the batch.

    Returns the flat (rows, D) prompt tensor and, per example, one AcousticPrompt per audio ref.
    """
    feats, texts, layout = [], [], []
    offset = 0
    q = model.n_query
    for ex in examples:
        cond = conditioning_ids(model, ex)
        per = []
        for ref in ex.audio_refs:
            f = store.load(ref)
            feats.append(f)
            texts.extend([cond] * len(f))
            per.append(sequence.AcousticPrompt(offset, len(f) * q, q, clip_id=ref))
            offset += len(f) * q
        layout.append(per)
    if model.encoder.patch.weight.requires_grad:
        specs = np.concatenate([store.spectrograms(r) for ex in examples for r in ex.audio_refs])
        f = model.encoder.forward_features(specs)
    else:
        f = ag.constant(np.concatenate(feats).astype(model.lm.embed.data.dtype))
    ids, lens = pad_text(texts)
    block = model.aligner.prompt_block(f, ids, lens)
    flat = ag.reshape(block, (block.shape[0] * q, block.shape[2]))
    for per in layout:
        for p in per:
            p.source = flat
    return flat, layout


def example_sequence(model, ex, prompts, training=True):
    v = model.vocab
    pairs = [(p, v.tokenize(t) if t else []) for p, t in zip(prompts, ex.texts)]
    answer = v.tokenize(ex.target) if training else None
    return sequence.build_interleaved(pairs, answer, training)


def lm_batch_loss(model, store, examples):
    flat, layout = acoustic_prompts(model, store, examples)
    seqs = [example_sequence(model, ex, ps) for ex, ps in zip(examples, layout)]
    return objectives.lm_loss(model.lm, seqs, flat)


def stage0_losses(model, store, examples, rng, tau):
    """(atm, agtg, atc) on (clip, target text) pairs; multi-segment clips use their first segment."""
    feats = np.stack([store.load(ex.audio_refs[0])[0] for ex in examples]).astype(model.lm.embed.data.dtype)
    texts = [model.vocab.tokenize(ex.target) for ex in examples]
    al = model.aligner
    return (objectives.atm_loss(al, feats, texts, rng),
            objectives.agtg_loss(al, ag.constant(feats), texts),
            objectives.atc_loss(al, ag.constant(feats), texts, tau))


def generate(model, store, examples, max_new_tokens=40, batch=32):
    """Greedy answers (token id lists) for each example."""
    out = []
    with ag.no_grad():
        for i in range(0, len(examples), batch):
            chunk = examples[i:i + batch]
            flat, layout = acoustic_prompts(model, store, chunk)
            seqs = [example_sequence(model, ex, ps, training=False) for ex, ps in zip(chunk, layout)]
            emb, _, lens = sequence.assemble_batch(seqs, model.lm, flat)
            prefixes = [emb.data[j, :lens[j]] for j in range(len(seqs))]
            out.extend(model.lm.greedy_generate_batch(prefixes, max_new_tokens))
    return out


def generate_text(model, store, examples, max_new_tokens=40, batch=32):
    return [model.vocab.detokenize(ids) for ids in generate(model, store, examples, max_new_tokens, batch)]


# ---------------------------------------------------------------------------
# text-only sequences for LM pretraining


def description_slots(model, ann, n_rows):
    ids = model.vocab.tokenize(describe_clip(ann))[:n_rows]
    return ids + [PAD] * (n_rows - len(ids))


def text_only_sequence(model, ex, anns, duration):
    """The interleaved layout with every audio block replaced by the clip's description tokens."""
    q = model.n_query
    prompts, desc, offset = [], [], 0
    for ref in ex.audio_refs:
        rows = model.segments_for(duration) * q
        prompts.append(sequence.AcousticPrompt(offset, rows, q, clip_id=ref))
        desc.extend(description_slots(model, anns[ref], rows))
        offset += rows
    seq = example_sequence(model, ex, prompts)
    desc = np.asarray(desc, dtype=np.int64)
    neg = seq.slots < 0
    seq.slots = seq.slots.copy()
    seq.slots[neg] = desc[-seq.slots[neg] - 1]
    return seq


def check_vocab(model, examples):
    """Raise if any example text maps to <UNK>."""
    from .language_model import UNK
    for ex in examples:
        for t in list(ex.texts) + [ex.target, ex.prompt]:
            if t and UNK in model.vocab.tokenize(t):
                raise ContractViolation(f"out-of-vocabulary text: {t!r}")
