"""Synthetic clips, segmentation, log-mel front end and the toy patch encoder."""

from __future__ import annotations

import json
import math
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import ontology
from .errors import ConfigError, ContractViolation
from .nn import Block, LayerNorm, Linear, Module, new_param
from .ontology import THROUGHOUT
from .optim import Adam


@dataclass
class EventSpec:
    label: str
    onset: float
    offset: float
    synth: tuple | None = None
    count_tag: int | str | None = None

    def __post_init__(self):
        if self.synth is None and self.label in ontology.BY_LABEL:
            self.synth = ontology.BY_LABEL[self.label].synth
        if self.synth is not None:
            self.synth = tuple(self.synth)

    @property
    def throughout(self):
        return self.count_tag == THROUGHOUT

    def to_dict(self):
        d = asdict(self)
        d["synth"] = list(self.synth) if self.synth else None
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["label"], float(d["onset"]), float(d["offset"]), d.get("synth"), d.get("count_tag"))


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    annotation: list = field(default_factory=list)
    clip_id: str = ""

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # (mel bins, frames)

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[1]


@dataclass
class AudioFeatureMap:
    values: np.ndarray  # (tokens, dim)
    segment_index: int = 0

    @property
    def tokens(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    n_mels: int = 40
    # coarse frames keep an 8x8 patch (5 bands x 10 frames) smaller than the embedding width
    win_ms: float = 250.0
    hop_ms: float = 125.0
    n_fft: int = 4096
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-6
    segment_seconds: float = 10.0
    spec_mean: float = -12.5
    spec_std: float = 4.3

    @property
    def win_length(self):
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self):
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def segment_samples(self):
        return int(round(self.segment_seconds * self.sample_rate))

    def frames_for(self, n_samples):
        padded = n_samples + self.win_length - self.hop_length
        return 1 + (padded - self.win_length) // self.hop_length


# ---------------------------------------------------------------------------
# synthesis

TONE_AMP = 0.3
NOISE_RMS = 0.15
FADE_S = 0.01


def _validate(events, duration):
    if duration <= 0:
        raise ContractViolation("clip duration must be positive")
    seen = set()
    for ev in events:
        ontology.lookup(ev.label)
        if ev.onset < 0 or ev.offset <= ev.onset:
            raise ContractViolation(f"event {ev.label!r}: need 0 <= onset < offset, got {ev.onset}-{ev.offset}")
        if ev.offset > duration + 1e-9:
            raise ContractViolation(f"event {ev.label!r} ends at {ev.offset}s past clip end {duration}s")
        key = (ev.label, round(ev.onset, 6))
        if key in seen:
            raise ContractViolation(f"two {ev.label!r} events share onset {ev.onset}s (ambiguous count)")
        seen.add(key)


def _fill_count_tags(events, duration):
    counts = {}
    for ev in events:
        counts[ev.label] = counts.get(ev.label, 0) + 1
    for ev in events:
        if ev.count_tag is None:
            spans_all = ev.onset <= 1e-9 and ev.offset >= duration - 1e-9
            ev.count_tag = THROUGHOUT if spans_all else counts[ev.label]


def annotate(events, duration):
    """Validated copy of ``events`` with count tags filled, without rendering audio."""
    events = [EventSpec.from_dict(e) if isinstance(e, dict) else EventSpec(e.label, e.onset, e.offset, e.synth, e.count_tag)
              for e in events]
    _validate(events, duration)
    _fill_count_tags(events, duration)
    return events


def _envelope(n, sr):
    env = np.ones(n)
    k = min(int(FADE_S * sr), n // 2)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = ramp
        env[n - k:] = ramp[::-1]
    return env


def _render_event(synth, n, sr, rng):
    t = np.arange(n) / sr
    kind = synth[0]
    if kind == "tone":
        phase = rng.uniform(0, 2 * np.pi)
        return TONE_AMP * np.sin(2 * np.pi * synth[1] * t + phase)
    if kind == "chirp":
        f0, f1 = synth[1], synth[2]
        span = max(n / sr, 1e-9)
        return TONE_AMP * np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * span)))
    if kind == "noise":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec[(freqs < synth[1]) | (freqs > synth[2])] = 0.0
        sig = np.fft.irfft(spec, n)
        rms = np.sqrt(np.mean(sig ** 2))
        return sig * (NOISE_RMS / rms) if rms > 0 else sig
    raise ContractViolation(f"unknown synth kind {kind!r}")


def synthesize_clip(events, duration, seed, sample_rate=16000, clip_id=""):
    """Render annotated events into a waveform; pure function of the arguments."""
    events = [EventSpec.from_dict(e) if isinstance(e, dict) else e for e in events]
    _validate(events, duration)
    _fill_count_tags(events, duration)
    n_total = int(round(duration * sample_rate))
    out = np.zeros(n_total)
    rng = np.random.default_rng(seed)
    for ev in events:
        start = int(round(ev.onset * sample_rate))
        stop = min(int(round(ev.offset * sample_rate)), n_total)
        n = stop - start
        if n <= 0:
            continue
        out[start:stop] += _render_event(ev.synth, n, sample_rate, rng) * _envelope(n, sample_rate)
    np.clip(out, -1.0, 1.0, out=out)
    return AudioClip(out.astype(np.float32), sample_rate, events, clip_id)


def sample_events(rng, duration, labels, counts=None, min_len=0.2, max_len=0.5):
    """Random non-overlapping (per label) events on a 0.1 s grid.

    Continuous classes span the whole clip; countable classes get ``counts[label]``
    occurrences (default 1-4).
    """
    events = []
    grid = int(round(duration * 10))
    for label in labels:
        cls = ontology.lookup(label)
        if not cls.countable:
            events.append(EventSpec(label, 0.0, round(duration, 1)))
            continue
        n = counts[label] if counts and label in counts else int(rng.integers(1, 5))
        lens = rng.integers(int(min_len * 10), int(max_len * 10) + 1, size=n)
        if int(lens.sum()) + n > grid:
            lens = np.full(n, int(min_len * 10))
        slack = grid - int(lens.sum()) - n  # keep a 0.1 s gap after each event
        if slack < 0:
            raise ContractViolation(f"{n} x {label!r} do not fit in {duration}s")
        cuts = np.sort(rng.integers(0, slack + 1, size=n))
        starts = cuts + np.concatenate([[0], np.cumsum(lens[:-1] + 1)])
        for s, ln in zip(starts, lens):
            events.append(EventSpec(label, round(float(s) / 10, 1), round(float(s + ln) / 10, 1)))
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def segment_clip(clip: AudioClip, segment_seconds=10.0):
    """Split into fixed-length segments, zero-padding the last one."""
    if clip.duration <= 0:
        raise ContractViolation("clip duration must be positive")
    seg_n = int(round(segment_seconds * clip.sample_rate))
    count = max(1, math.ceil(len(clip.samples) / seg_n))
    out = []
    for i in range(count):
        chunk = clip.samples[i * seg_n:(i + 1) * seg_n]
        if len(chunk) < seg_n:
            chunk = np.concatenate([chunk, np.zeros(seg_n - len(chunk), dtype=clip.samples.dtype)])
        t0, t1 = i * segment_seconds, (i + 1) * segment_seconds
        ann = [
            EventSpec(e.label, max(e.onset, t0) - t0, min(e.offset, t1) - t0, e.synth, e.count_tag)
            for e in clip.annotation if e.offset > t0 and e.onset < t1
        ]
        out.append(AudioClip(chunk, clip.sample_rate, ann, f"{clip.clip_id}#{i}" if clip.clip_id else ""))
    return out


# ---------------------------------------------------------------------------
# log-mel front end


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig):
    """Triangular HTK-mel filters with unit peak, shape (n_mels, n_fft//2+1)."""
    fmax = cfg.fmax or cfg.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    fb = np.zeros((cfg.n_mels, len(freqs)))
    for k in range(cfg.n_mels):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_centers(cfg: FrontendConfig):
    fmax = cfg.fmax or cfg.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    return edges[1:-1]


_FB_CACHE = {}


def log_mel(clip: AudioClip, cfg: FrontendConfig) -> Spectrogram:
    """Power log-mel spectrogram.

    The tail is padded with ``win - hop`` zeros so a segment of ``n`` samples
    yields ``n // hop`` frames.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ContractViolation(f"sample rate {clip.sample_rate} != front-end rate {cfg.sample_rate}")
    win, hop = cfg.win_length, cfg.hop_length
    if len(clip.samples) < win:
        raise ContractViolation(f"clip of {len(clip.samples)} samples is shorter than one window ({win})")
    x = np.concatenate([clip.samples.astype(np.float64), np.zeros(win - hop)])
    n_frames = 1 + (len(x) - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    window = np.hanning(win + 1)[:-1]
    power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1)) ** 2
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(cfg)
    mel = power @ _FB_CACHE[key].T
    return Spectrogram(np.log(np.maximum(mel, cfg.log_floor)).T.astype(np.float32))


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderConfig:
    grid_mel: int = 8
    grid_time: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4

    @property
    def tokens(self):
        return self.grid_mel * self.grid_time


# documented reference scale of the pretrained encoder's output grid
FULL_SCALE_FEATURE_SHAPE = (1024, 512)


class AudioEncoder(Module):
    """Patch-embedding transformer; features are tapped after block ``depth - 1``."""

    def __init__(self, cfg: EncoderConfig, frontend: FrontendConfig, rng):
        frames = frontend.frames_for(frontend.segment_samples)
        if frontend.n_mels % cfg.grid_mel or frames % cfg.grid_time:
            raise ConfigError(
                f"patch grid {cfg.grid_mel}x{cfg.grid_time} does not divide spectrogram "
                f"{frontend.n_mels}x{frames}"
            )
        if cfg.depth < 2:
            raise ConfigError("encoder depth must be >= 2 to have a penultimate block")
        self.cfg = cfg
        self.frontend = frontend
        self.patch_mel = frontend.n_mels // cfg.grid_mel
        self.patch_time = frames // cfg.grid_time
        self.frames = frames
        patch_dim = self.patch_mel * self.patch_time
        self.patch = Linear(patch_dim, cfg.dim, rng)
        self.pos = new_param(rng.normal(0.0, 0.1, (cfg.tokens, cfg.dim)))
        self.blocks = [Block(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]
        # masked-reconstruction head, used only by pretrain_encoder
        self.mask_token = new_param(np.zeros(cfg.dim))
        self.head_norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, patch_dim, rng)

    def patchify(self, values):
        """(B, mels, frames) -> (B, tokens, patch_mel * patch_time)."""
        b = values.shape[0]
        g_m, g_t = self.cfg.grid_mel, self.cfg.grid_time
        x = values.reshape(b, g_m, self.patch_mel, g_t, self.patch_time)
        x = x.transpose(0, 1, 3, 2, 4).reshape(b, g_m * g_t, self.patch_mel * self.patch_time)
        return (x - self.frontend.spec_mean) / self.frontend.spec_std

    def _embed(self, patches, keep=None):
        b = patches.shape[0]
        x = self.patch(ag.constant(patches, dtype=self.patch.weight.dtype))
        if keep is not None:
            tok = ag.expand(ag.expand(self.mask_token, self.cfg.tokens), b)
            x = ag.add(ag.mul(x, ag.constant(np.broadcast_to(keep, x.shape))),
                       ag.mul(tok, ag.constant(np.broadcast_to(1.0 - keep, x.shape))))
        return ag.add(x, ag.expand(self.pos, b))

    def forward_features(self, values):
        """Batch (B, mels, frames) -> (B, tokens, dim) Tensor at the penultimate tap (on the tape)."""
        x = self._embed(self.patchify(np.asarray(values)))
        for blk in self.blocks[:-1]:
            x = blk(x)
        return x

    def features(self, values):
        with ag.no_grad():
            return self.forward_features(values).data

    def encode(self, spec: Spectrogram, segment_index=0) -> AudioFeatureMap:
        if spec.values.shape != (self.frontend.n_mels, self.frames):
            raise ContractViolation(
                f"spectrogram {spec.values.shape} is not a full segment {(self.frontend.n_mels, self.frames)}"
            )
        return AudioFeatureMap(self.features(spec.values[None])[0], segment_index)

    def reconstruction_loss(self, values, rng, mask_ratio=0.5):
        patches = self.patchify(values)
        b, t, _ = patches.shape
        keep = (rng.random((b, t, 1)) >= mask_ratio).astype(patches.dtype)
        x = self._embed(patches, keep)
        for blk in self.blocks:
            x = blk(x)
        pred = self.head(self.head_norm(x))
        diff = ag.add(pred, ag.constant(-patches, dtype=pred.dtype))
        weight = np.broadcast_to(1.0 - keep, patches.shape)
        denom = max(float(weight.sum()), 1.0)
        return ag.scale(ag.sum_(ag.mul(ag.mul(diff, diff), ag.constant(weight))), 1.0 / denom)


def pretrain_encoder(encoder: AudioEncoder, spectrograms, steps, lr=1e-3, batch_size=16, seed=0):
    """Masked-patch reconstruction pretraining; returns the loss trace."""
    if steps <= 0 or len(spectrograms) == 0:
        return []
    rng = np.random.default_rng(seed)
    data = np.stack(spectrograms)
    opt = Adam(dict(encoder.named_parameters()), clip_norm=1.0)
    trace = []
    for step in range(steps):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        ag.reset_tape()
        loss = encoder.reconstruction_loss(data[idx], rng)
        ag.backward(loss)
        opt.step(lr)
        opt.zero_grad()
        trace.append(float(loss.data))
    return trace


def clip_spectrograms(clip: AudioClip, cfg: FrontendConfig):
    return [log_mel(seg, cfg).values for seg in segment_clip(clip, cfg.segment_seconds)]


def extract_features(clip: AudioClip, cfg: FrontendConfig, encoder: AudioEncoder):
    """One AudioFeatureMap per 10 s (configurable) segment."""
    specs = clip_spectrograms(clip, cfg)
    feats = encoder.features(np.stack(specs))
    return [AudioFeatureMap(f, i) for i, f in enumerate(feats)]


# ---------------------------------------------------------------------------
# persistence


def write_wav(path, clip: AudioClip):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(
        {"clip_id": clip.clip_id, "duration": clip.duration, "sample_rate": clip.sample_rate,
         "events": [e.to_dict() for e in clip.annotation]},
        sort_keys=True) + "\n")


def read_wav(path) -> AudioClip:
    path = Path(path)
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ContractViolation(f"{path}: expected mono PCM16")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    events, clip_id = [], path.stem
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        events = [EventSpec.from_dict(e) for e in meta["events"]]
        clip_id = meta.get("clip_id", clip_id)
    return AudioClip((pcm / 32767.0).astype(np.float32), sr, events, clip_id)
