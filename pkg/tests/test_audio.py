import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aptlm import audio, ontology
from aptlm.audio import AudioClip, EventSpec, FrontendConfig
from aptlm.errors import ConfigError, ContractViolation

FE = FrontendConfig()


def _db(x):
    return 10 * np.log10(np.mean(np.asarray(x, dtype=np.float64) ** 2) + 1e-20)


def test_empty_event_list_is_silence():
    clip = audio.synthesize_clip([], 2.0, seed=7)
    assert len(clip.samples) == 32000
    assert clip.annotation == []
    assert not clip.samples.any()


def test_event_energy_exceeds_silence():
    clip = audio.synthesize_clip([EventSpec("dog bark", 1.0, 1.5)], 10.0, seed=1)
    sr = clip.sample_rate
    inside = clip.samples[int(1.0 * sr):int(1.5 * sr)]
    outside = np.concatenate([clip.samples[:int(0.9 * sr)], clip.samples[int(1.6 * sr):]])
    assert _db(inside) - _db(outside) > 20


def test_count_tag_filled_from_occurrences():
    events = [EventSpec("wood creaking", 0.5 + i, 0.9 + i) for i in range(6)]
    clip = audio.synthesize_clip(events, 10.0, seed=0)
    assert {e.count_tag for e in clip.annotation} == {6}


def test_whole_clip_event_tagged_throughout():
    ann = audio.annotate([EventSpec("rain", 0.0, 10.0), EventSpec("cough", 2.0, 2.4)], 10.0)
    tags = {e.label: e.count_tag for e in ann}
    assert tags == {"rain": ontology.THROUGHOUT, "cough": 1}


@pytest.mark.parametrize("events,duration", [
    ([EventSpec("cough", 1.0, 1.2), EventSpec("cough", 1.0, 1.4)], 5.0),
    ([EventSpec("cough", 4.8, 5.2)], 5.0),
    ([EventSpec("cough", 1.0, 1.0)], 5.0),
    ([EventSpec("not a class", 1.0, 2.0)], 5.0),
    ([], 0.0),
])
def test_bad_events_rejected(events, duration):
    with pytest.raises(ContractViolation):
        audio.synthesize_clip(events, duration, seed=0)


def test_synthesis_deterministic_per_seed():
    ev = [EventSpec("footsteps", 0.2, 0.6), EventSpec("siren", 1.0, 1.8)]
    a = audio.synthesize_clip(ev, 3.0, seed=3).samples
    b = audio.synthesize_clip(ev, 3.0, seed=3).samples
    c = audio.synthesize_clip(ev, 3.0, seed=4).samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(2.0, 30.0))
def test_sampled_events_are_valid(seed, duration):
    duration = round(duration, 1)
    rng = np.random.default_rng(seed)
    labels = list(rng.choice(ontology.LABELS, size=3, replace=False))
    events = audio.sample_events(rng, duration, labels)
    ann = audio.annotate(events, duration)
    for e in ann:
        assert 0 <= e.onset < e.offset <= duration + 1e-9
        if not ontology.lookup(e.label).countable:
            assert e.throughout


@pytest.mark.parametrize("duration,count,pad", [(25.0, 3, 5.0), (10.0, 1, 0.0), (0.5, 1, 9.5)])
def test_segment_counts_and_padding(duration, count, pad):
    n = int(round(duration * 16000))
    clip = AudioClip(np.ones(n, dtype=np.float32), 16000)
    segs = audio.segment_clip(clip)
    assert len(segs) == count
    assert all(len(s.samples) == 160000 for s in segs)
    zeros = int(np.sum(segs[-1].samples == 0))
    assert zeros == int(round(pad * 16000))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 60.0))
def test_segment_count_property(duration):
    n = max(1, int(round(duration * 100)))
    clip = AudioClip(np.zeros(n, dtype=np.float32), 100)
    assert len(audio.segment_clip(clip)) == math.ceil(n / 1000)


def test_segment_annotation_is_local():
    ev = [EventSpec("cough", 9.5, 10.5), EventSpec("alarm", 12.0, 12.5)]
    clip = audio.synthesize_clip(ev, 15.0, seed=0)
    s0, s1 = audio.segment_clip(clip)
    assert [(e.label, e.onset, e.offset) for e in s0.annotation] == [("cough", 9.5, 10.0)]
    got = [(e.label, round(e.onset, 6), round(e.offset, 6)) for e in s1.annotation]
    assert got == [("cough", 0.0, 0.5), ("alarm", 2.0, 2.5)]


def test_silence_gives_log_floor():
    clip = AudioClip(np.zeros(160000, dtype=np.float32), 16000)
    spec = audio.log_mel(clip, FE)
    assert spec.values.shape == (FE.n_mels, FE.frames_for(160000))
    assert np.all(spec.values == np.float32(np.log(FE.log_floor)))


def test_frame_count_formula():
    for n in (4000, 16000, 160000, 12345):
        clip = AudioClip(np.zeros(n, dtype=np.float32), 16000)
        padded = n + FE.win_length - FE.hop_length
        assert audio.log_mel(clip, FE).frames == 1 + (padded - FE.win_length) // FE.hop_length


@pytest.mark.parametrize("k", [4, 10, 20, 30, 38])
def test_tone_at_mel_center_peaks_in_its_bin(k):
    f = audio.mel_centers(FE)[k]
    t = np.arange(16000) / 16000
    clip = AudioClip((0.3 * np.sin(2 * np.pi * f * t)).astype(np.float32), 16000)
    spec = audio.log_mel(clip, FE).values
    assert np.all(np.argmax(spec, axis=0) == k)


def test_doubling_amplitude_adds_log4():
    rng = np.random.default_rng(0)
    x = (0.1 * rng.standard_normal(16000)).astype(np.float64)
    a = audio.log_mel(AudioClip(x, 16000), FE).values.astype(np.float64)
    b = audio.log_mel(AudioClip(2 * x, 16000), FE).values.astype(np.float64)
    np.testing.assert_allclose(b - a, np.log(4.0), atol=1e-4)


def test_log_mel_contract_errors():
    with pytest.raises(ContractViolation):
        audio.log_mel(AudioClip(np.zeros(16000, dtype=np.float32), 8000), FE)
    with pytest.raises(ContractViolation):
        audio.log_mel(AudioClip(np.zeros(10, dtype=np.float32), 16000), FE)


@pytest.fixture(scope="module")
def encoder():
    return audio.AudioEncoder(audio.EncoderConfig(), FE, np.random.default_rng(0))


def test_encoder_shape_is_input_independent(encoder):
    rng = np.random.default_rng(1)
    shapes = set()
    for dur in (1.0, 10.0, 25.0):
        clip = audio.synthesize_clip(audio.sample_events(rng, dur, ["cough", "rain"]), dur, seed=2)
        maps = audio.extract_features(clip, FE, encoder)
        assert len(maps) == math.ceil(dur / 10)
        assert [m.segment_index for m in maps] == list(range(len(maps)))
        shapes |= {m.values.shape for m in maps}
    assert shapes == {(64, 64)}
    assert audio.FULL_SCALE_FEATURE_SHAPE == (1024, 512)


def test_segment_features_are_local(encoder):
    a = audio.synthesize_clip([EventSpec("cough", 1.0, 1.3)], 20.0, seed=0)
    b = audio.synthesize_clip([EventSpec("cough", 1.0, 1.3), EventSpec("alarm", 14.0, 14.5)], 20.0, seed=0)
    fa, fb = audio.extract_features(a, FE, encoder), audio.extract_features(b, FE, encoder)
    assert np.array_equal(fa[0].values, fb[0].values)
    assert not np.array_equal(fa[1].values, fb[1].values)


def test_encoder_taps_penultimate_block(encoder):
    spec = audio.log_mel(AudioClip(np.zeros(160000, dtype=np.float32), 16000), FE)
    x = encoder._embed(encoder.patchify(spec.values[None]))
    for blk in encoder.blocks[:-1]:
        x = blk(x)
    assert np.array_equal(encoder.encode(spec).values, x.data[0])


def test_encoder_rejects_partial_segment(encoder):
    with pytest.raises(ContractViolation):
        encoder.encode(audio.Spectrogram(np.zeros((FE.n_mels, 3), dtype=np.float32)))


def test_bad_patch_grid_is_config_error():
    with pytest.raises(ConfigError):
        audio.AudioEncoder(audio.EncoderConfig(grid_mel=7), FE, np.random.default_rng(0))


def test_pretraining_reduces_reconstruction_loss():
    enc = audio.AudioEncoder(audio.EncoderConfig(depth=2, dim=32), FE, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    specs = [audio.log_mel(audio.synthesize_clip(audio.sample_events(rng, 10.0, [lb]), 10.0, seed=i), FE).values
             for i, lb in enumerate(ontology.LABELS[:8])]
    trace = audio.pretrain_encoder(enc, specs, steps=40, lr=3e-3, batch_size=4)
    assert np.mean(trace[-5:]) < np.mean(trace[:5])


def test_wav_round_trip(tmp_path):
    clip = audio.synthesize_clip([EventSpec("bell ring", 0.5, 1.0)], 2.0, seed=5, clip_id="c1")
    audio.write_wav(tmp_path / "c1.wav", clip)
    back = audio.read_wav(tmp_path / "c1.wav")
    assert back.clip_id == "c1" and back.sample_rate == 16000
    assert np.max(np.abs(back.samples - clip.samples)) <= 1 / 32767 + 1e-7
    assert [e.to_dict() for e in back.annotation] == [e.to_dict() for e in clip.annotation]


def test_too_many_events_for_duration_rejected():
    with pytest.raises(ContractViolation):
        audio.sample_events(np.random.default_rng(0), 1.0, ["cough"], counts={"cough": 4})
