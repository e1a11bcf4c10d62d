import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aptlm import audio, ontology, tasks, templates
from aptlm import autograd as ag
from aptlm import language_model as L
from aptlm.errors import ContractViolation, SequenceLengthError
from aptlm.optim import Adam

VOCAB = L.default_vocabulary()


def lm(depth=2, width=16, max_positions=64, frozen=True, seed=0):
    cfg = L.DecoderConfig(depth=depth, width=width, heads=2, max_positions=max_positions, frozen=frozen)
    return L.LanguageModel(cfg, 30, np.random.default_rng(seed))


def test_few_shot_prompt_tokens():
    ids = VOCAB.tokenize("This is a sound of")
    assert len(ids) == 5 and L.UNK not in ids
    assert VOCAB.detokenize(ids) == "this is a sound of"


def test_empty_text():
    assert VOCAB.tokenize("") == []
    assert VOCAB.detokenize([]) == ""


def test_timestamps_are_atomic():
    ids = VOCAB.tokenize("1.2s-3.4s")
    assert [VOCAB.word(i) for i in ids] == ["1.2s", "-", "3.4s"]
    assert VOCAB.detokenize(ids) == "1.2s-3.4s"


def test_unknown_word_maps_to_unk():
    assert VOCAB.tokenize("zebra") == [L.UNK]


def test_specials_never_surface():
    ids = [L.BOS, L.AUDIO] + VOCAB.tokenize("dog bark") + [L.EOS, L.PAD]
    assert VOCAB.detokenize(ids) == "dog bark"


def _rendered_corpus():
    rng = np.random.default_rng(0)
    out = list(templates.all_template_text())
    for i in range(60):
        labels = list(rng.choice(ontology.LABELS, size=2, replace=False))
        ann = audio.annotate(audio.sample_events(rng, 10.0, labels), 10.0)
        for kind in ("AT", "AAC", "QSED", "TER", "SEC"):
            try:
                ex = tasks.render_single_clip_task(kind, ann, seed=i)
            except tasks.UnsupportedAnnotation:
                continue
            out += [ex.prompt, ex.target]
        ex = tasks.render_aqa(ann, seed=i)
        out += [ex.prompt, ex.target]
    return [s for s in out if "{" not in s]


def test_round_trip_on_template_corpus():
    corpus = _rendered_corpus()
    assert len(corpus) > 500
    for text in corpus:
        ids = VOCAB.tokenize(text)
        assert L.UNK not in ids, text
        assert VOCAB.detokenize(ids) == L.normalize_text(text)


def test_embed_tokens_marker_and_range():
    m = lm()
    e = m.embed_tokens([7, 7, L.AUDIO]).data
    assert np.array_equal(e[0], e[1])
    assert np.array_equal(e[2], m.audio_marker.data[0])
    with pytest.raises(ContractViolation):
        m.embed_tokens([30])


def test_marker_trains_while_table_frozen():
    m = lm()
    emb = ag.reshape(m.embed_tokens([L.BOS, L.AUDIO, 5, 6]), (1, 4, 16))
    loss = ag.cross_entropy(m.forward(emb), np.array([[ag.IGNORE_INDEX, 5, 6, L.EOS]]))
    params = [p for _, p in m.named_parameters()]
    g = ag.backward(loss, params)
    assert np.any(g[m.audio_marker.node_id] != 0)
    assert [n for n, p in m.lm_parameters() if p.node_id in g] == []


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_causality(seed, i):
    rng = np.random.default_rng(seed)
    m = lm()
    x = rng.normal(size=(1, 8, 16))
    y = x.copy()
    y[:, i:] = rng.normal(size=y[:, i:].shape)
    a = m.forward(ag.constant(x)).data
    b = m.forward(ag.constant(y)).data
    np.testing.assert_array_equal(a[:, :i], b[:, :i])


def test_single_token_one_row():
    assert lm().forward(ag.constant(np.zeros((1, 1, 16)))).shape == (1, 1, 30)


def test_over_length_rejected():
    with pytest.raises(SequenceLengthError):
        lm(max_positions=4).forward(ag.constant(np.zeros((1, 5, 16))))


def test_greedy_generation():
    m = lm()
    prefix = m.embed_tokens([L.BOS, 5, 6]).data
    a = m.greedy_generate(prefix, 6)
    assert a == m.greedy_generate(prefix, 6)
    assert m.greedy_generate(prefix, 0) == []
    assert len(a) <= 6 and L.EOS not in a
    with pytest.raises(ContractViolation):
        m.greedy_generate(np.zeros((0, 16)), 3)


def test_batched_generation_matches_single():
    m = lm()
    prefixes = [m.embed_tokens(ids).data for ids in ([1, 5], [1, 6, 7, 8], [1, 9, 9])]
    batch = m.greedy_generate_batch(prefixes, 5)
    assert batch == [m.greedy_generate(p, 5) for p in prefixes]


def test_overfit_one_pair_then_generate():
    m = lm(frozen=False)
    seq = [L.BOS, 5, 6, 7, 8, 9]
    tgt = np.array([[ag.IGNORE_INDEX, ag.IGNORE_INDEX, 7, 8, 9, L.EOS]])
    opt = Adam(dict(m.named_parameters()))
    for _ in range(150):
        ag.reset_tape()
        emb = ag.reshape(m.embed_tokens(seq), (1, 6, 16))
        ag.backward(ag.cross_entropy(m.forward(emb), tgt))
        opt.step(1e-2)
        opt.zero_grad()
    assert m.greedy_generate(m.embed_tokens(seq[:3]).data, 5) == [7, 8, 9]
