"""Finite-difference gradient suites at double precision, grouped by scope."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import objectives, sequence
from .aligner import MODES, Aligner, AlignerConfig
from .autograd import IGNORE_INDEX, finite_difference_check
from .language_model import DecoderConfig, LanguageModel

SCOPES = ("ops", "aligner", "objectives", "end2end")
TOLERANCE = {"ops": 1e-6, "aligner": 1e-5, "objectives": 1e-5, "end2end": 1e-5}


@dataclass
class CaseResult:
    scope: str
    name: str
    max_rel_error: float
    passed: bool
    n_checked: int
    n_params: int = 0

    def line(self):
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.scope:10s} {self.name:28s} max_rel_err={self.max_rel_error:.3e} coords={self.n_checked}"


def _weighted(out, rng):
    """Scalar probe: sum of the output against a fixed random weight tensor."""
    w = ag.constant(rng.normal(size=out.shape))
    return ag.sum_(ag.mul(out, w))


def _op_cases(rng):
    r = lambda *s: ag.parameter(rng.normal(size=s))  # noqa: E731
    ids = rng.integers(0, 6, size=(3, 4))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    tgt = rng.integers(0, 5, size=6)
    tgt[2] = IGNORE_INDEX
    labels = rng.integers(0, 2, size=4).astype(float)
    cases = {
        "matmul": ([r(3, 4), r(4, 2)], lambda a, b: ag.matmul(a, b)),
        "matmul-batched": ([r(2, 3, 4), r(2, 4, 5)], lambda a, b: ag.matmul(a, b)),
        "linear": ([r(2, 3, 4), r(4, 5), r(5)], lambda x, w, b: ag.linear(x, w, b)),
        "add": ([r(3, 4), r(3, 4)], lambda a, b: ag.add(a, b)),
        "mul": ([r(3, 4), r(3, 4)], lambda a, b: ag.mul(a, b)),
        "scale": ([r(3, 4)], lambda a: ag.scale(a, -1.7)),
        "concat": ([r(2, 3), r(2, 2)], lambda a, b: ag.concat([a, b], axis=1)),
        "slice": ([r(3, 5)], lambda a: ag.slice_(a, 1, 4, axis=1)),
        "embedding_lookup": ([r(6, 3)], lambda t: ag.embedding_lookup(t, ids)),
        "layer_norm": ([r(3, 6), r(6), r(6)], lambda x, g, b: ag.layer_norm(x, g, b)),
        "gelu": ([r(4, 5)], lambda a: ag.gelu(a)),
        "masked_softmax": ([r(3, 5)], lambda a: ag.masked_softmax(a, mask)),
        "cross_entropy": ([r(6, 5)], lambda a: ag.cross_entropy(a, tgt)),
        "mean": ([r(3, 4)], lambda a: ag.mean(a, axis=1)),
        "sum": ([r(3, 4)], lambda a: ag.sum_(a, axis=0)),
        "sigmoid_bce": ([r(4)], lambda a: ag.sigmoid_bce(a, labels)),
        "reshape": ([r(3, 4)], lambda a: ag.reshape(a, (2, 6))),
        "transpose": ([r(2, 3, 4)], lambda a: ag.transpose(a, (2, 0, 1))),
        "expand": ([r(3, 4)], lambda a: ag.expand(a, 2)),
        "max": ([r(3, 5)], lambda a: ag.max_(a, axis=1)),
        "normalize": ([r(3, 4)], lambda a: ag.normalize(a)),
    }
    return cases


def run_ops(seed=0):
    out = []
    with ag.precision(np.float64):
        for name, (points, fn) in _op_cases(np.random.default_rng(seed)).items():
            wrng = np.random.default_rng([seed, len(out)])
            probe = None

            def f(*xs, fn=fn):
                nonlocal probe
                y = fn(*xs)
                if y.ndim == 0:
                    return y
                if probe is None:
                    probe = wrng.normal(size=y.shape)
                return ag.sum_(ag.mul(y, ag.constant(probe)))

            rep = finite_difference_check(f, points, epsilon=1e-6, tolerance=TOLERANCE["ops"])
            out.append(CaseResult("ops", name, rep.max_rel_error, rep.passed, rep.n_checked,
                                  sum(p.data.size for p in points)))
    return out


def tiny_aligner(rng, vocab_size=10, n_query=2, width=6, feature_dim=4):
    cfg = AlignerConfig(n_query=n_query, width=width, depth=1, heads=2, feature_dim=feature_dim,
                        lm_width=width, max_text=8, ff_mult=1)
    return Aligner(cfg, vocab_size, rng)


def tiny_lm(rng, vocab_size=10, width=6):
    return LanguageModel(DecoderConfig(depth=1, width=width, heads=2, max_positions=32, frozen=True, ff_mult=1),
                         vocab_size, rng)


def _params(module):
    return [p for _, p in module.named_parameters()]


def _check(scope, name, loss_fn, params):
    rep = finite_difference_check(lambda *_: loss_fn(), params, epsilon=1e-6, tolerance=TOLERANCE[scope])
    return CaseResult(scope, name, rep.max_rel_error, rep.passed, rep.n_checked, sum(p.data.size for p in params))


def run_aligner(seed=0):
    out = []
    with ag.precision(np.float64):
        rng = np.random.default_rng(seed)
        al = tiny_aligner(rng)
        feats = rng.normal(size=(2, 3, 4))
        ids = [[4, 5, 6], [7, 8]]
        for mode in MODES:
            wrng = np.random.default_rng([seed, 1])
            wz = wrng.normal(size=(2, 2, 6))
            wt = wrng.normal(size=(2, 3, 6))

            def loss(mode=mode, wz=wz, wt=wt):
                z, t = al.align(feats, ids, mode)
                s = ag.sum_(ag.mul(z, ag.constant(wz)))
                return ag.add(s, ag.sum_(ag.mul(t, ag.constant(wt))))

            out.append(_check("aligner", f"align[{mode}]", loss, _params(al)))
        out.append(_check("aligner", "encode_text", lambda: _weighted(al.encode_text(ids), np.random.default_rng(3)),
                          _params(al)))
    return out


def run_objectives(seed=0):
    out = []
    with ag.precision(np.float64):
        rng = np.random.default_rng(seed)
        al = tiny_aligner(rng)
        lm = tiny_lm(rng)
        lm.freeze(False)
        feats = rng.normal(size=(3, 3, 4))
        texts = [[4, 5, 6], [7, 8], [9, 4]]
        out.append(_check("objectives", "atm", lambda: objectives.atm_loss(al, feats, texts,
                                                                            np.random.default_rng(1)), _params(al)))
        out.append(_check("objectives", "agtg", lambda: objectives.agtg_loss(al, ag.constant(feats), texts),
                          _params(al)))
        out.append(_check("objectives", "atc", lambda: objectives.atc_loss(al, ag.constant(feats), texts, 0.5),
                          _params(al)))
        seqs = [_text_sequence([4, 5], [6, 7]), _text_sequence([8], [9, 4, 5])]
        out.append(_check("objectives", "lm_loss", lambda: objectives.lm_loss(lm, seqs), _params(lm)))
    return out


def _text_sequence(prompt, answer):
    items = [sequence.SegmentItem("text", ids=tuple(prompt)),
             sequence.SegmentItem("text", role="answer", ids=tuple(answer))]
    return sequence.rebuild(items)


def run_end2end(seed=0):
    """Aligner prompts spliced into a frozen LM; gradients w.r.t. aligner and [AUDIO] marker."""
    with ag.precision(np.float64):
        rng = np.random.default_rng(seed)
        al = tiny_aligner(rng, n_query=2)
        lm = tiny_lm(rng)
        feats = rng.normal(size=(3, 3, 4))
        cond = [[4, 5], [4, 5], [6]]
        layout = [[(0, 2, [7]), (2, 2, [8, 9])], [(4, 2, [5])]]
        answers = [[6, 7], [9]]

        def loss():
            block = al.prompt_block(ag.constant(feats), cond)
            flat = ag.reshape(block, (6, block.shape[2]))
            seqs = []
            for per, ans in zip(layout, answers):
                pairs = [(sequence.AcousticPrompt(o, n, 2, source=flat), txt) for o, n, txt in per]
                seqs.append(sequence.build_interleaved(pairs, ans))
            return objectives.lm_loss(lm, seqs, flat)

        params = _params(al) + [lm.audio_marker]
        res = _check("end2end", "prompts->frozen-lm", loss, params)
    return [res]


RUNNERS = {"ops": run_ops, "aligner": run_aligner, "objectives": run_objectives, "end2end": run_end2end}


def run_scope(scope, seed=0):
    if scope not in RUNNERS:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return RUNNERS[scope](seed)
