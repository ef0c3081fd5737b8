import json
import math
import sys
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spanrewrite.corpus import TokenSeq, build_vocab, tokenize
from spanrewrite.generators import (
    ExternalGenerator,
    ExternalGeneratorError,
    GenConfig,
    GeneratorOutput,
    IdentityGenerator,
    NgramGenerator,
    NgramLM,
    NoiseConfig,
    RuleNoiseGenerator,
    ScriptedGenerator,
    expected_edit_rate,
    generate_spans,
    noise_tokens,
    nucleus,
    nucleus_sample,
    span_output,
    train_ngram,
)
from spanrewrite.kernels import levenshtein
from spanrewrite.masking import mask_from_spans, sample_spans
from spanrewrite.rng import derive_rng

from helpers import words

STUB = Path(__file__).parent / "stubs" / "echo_generator.py"


# --- nucleus sampling ------------------------------------------------------


def test_nucleus_set_and_renormalization():
    keep, mass = nucleus([0.5, 0.3, 0.15, 0.05], 0.9)
    assert keep.tolist() == [0, 1, 2]
    np.testing.assert_allclose(mass, [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95])


def test_nucleus_boundary_and_ties():
    # cumulative mass hits p exactly at the second token
    assert nucleus([0.5, 0.4, 0.1], 0.9)[0].tolist() == [0, 1]
    # equal probabilities break ties by lower id
    assert nucleus([0.25, 0.25, 0.25, 0.25], 0.5)[0].tolist() == [0, 1]
    assert nucleus([0.1, 0.2, 0.3, 0.4], 1.0)[0].tolist() == [3, 2, 1, 0]


def test_nucleus_sampling_frequencies():
    dist = [0.5, 0.3, 0.15, 0.05]
    ids, probs = nucleus_sample(dist, 0.9, np.random.default_rng(0), size=1_000_000)
    counts = np.bincount(ids, minlength=4) / ids.size
    assert counts[3] == 0
    expected = np.array([0.5, 0.3, 0.15]) / 0.95
    se = np.sqrt(expected * (1 - expected) / ids.size)
    assert np.all(np.abs(counts[:3] - expected) < 5 * se)
    # reported probability is the untruncated one
    assert set(np.round(probs, 12)) == {0.5, 0.3, 0.15}


def test_nucleus_small_p_is_greedy():
    rng = np.random.default_rng(1)
    dist = np.array([0.1, 0.6, 0.3])
    for _ in range(50):
        assert nucleus_sample(dist, 1e-9, rng) == (1, 0.6)


@pytest.mark.parametrize("dist", [[], [0.5, 0.6], [1.2, -0.2], [np.nan, 1.0], [[0.5, 0.5]]])
def test_nucleus_rejects_bad_distributions(dist):
    with pytest.raises(ValueError, match="invalid distribution"):
        nucleus(dist, 0.9)


@pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
def test_nucleus_rejects_bad_threshold(p):
    with pytest.raises(ValueError):
        nucleus([1.0], p)


@settings(max_examples=200, deadline=None)
@given(
    w=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30).filter(lambda w: sum(w) > 1e-3),
    p=st.floats(0.01, 1.0),
)
def test_nucleus_is_minimal_prefix(w, p):
    d = np.array(w) / sum(w)
    keep, mass = nucleus(d, p)
    assert abs(mass.sum() - 1) < 1e-9
    assert d[keep].sum() >= p - 1e-9
    # dropping the last kept token would fall short
    assert keep.size == 1 or d[keep[:-1]].sum() < p
    # everything outside is no more likely than anything inside
    outside = np.setdiff1d(np.arange(d.size), keep)
    assert outside.size == 0 or d[outside].max() <= d[keep].min()


# --- n-gram model ------------------------------------------------------------


def backoff_oracle(seqs, vocab, order, alpha):
    """Recursive stupid backoff, written from its definition."""
    pad = [vocab.bos] * (order - 1)
    grams = Counter()
    for s in seqs:
        p = pad + list(s)
        for i in range(order - 1, len(p)):
            for k in range(order):
                grams[tuple(p[i - k : i + 1])] += 1
    unigrams = {g[0]: c for g, c in grams.items() if len(g) == 1}
    total = sum(unigrams.values())
    support = vocab.content_ids()

    def score(t, ctx):
        if not ctx:
            return (unigrams.get(t, 0) + 1) / (total + len(support)) if t in support else 0.0
        c = grams.get(ctx + (t,), 0)
        if c:
            denom = sum(v for g, v in grams.items() if len(g) == len(ctx) + 1 and g[:-1] == ctx)
            return c / denom
        return alpha * score(t, ctx[1:])

    def dist(context):
        ctx = tuple((pad + list(context))[len(context) :]) if order > 1 else ()
        s = np.array([score(t, ctx) for t in range(len(vocab))])
        return s / s.sum()

    return dist


def test_bigram_a_b_hand_values():
    vocab = build_vocab(["a b a b"], max_size=100, max_sentinels=2)
    lm = train_ngram([tokenize("a b a b", vocab)], vocab, order=2)
    a, b = vocab.id_of["a"], vocab.id_of["b"]
    assert lm.score(b, [a]) == 1.0
    # support is {UNK, a, b}: add-one unigram floor is 3/7 for a and b, 1/7 for UNK
    expected = Fraction(1) / (1 + Fraction(2, 5) * Fraction(3, 7) + Fraction(2, 5) * Fraction(1, 7))
    assert lm.distribution([a])[b] == pytest.approx(float(expected), abs=1e-12)


def test_ngram_matches_backoff_oracle(windows, vocab):
    seqs = [w.ids for w in windows[:150]]
    lm = train_ngram(windows[:150], vocab, order=3, alpha=0.4)
    oracle = backoff_oracle(seqs, vocab, 3, 0.4)
    rng = np.random.default_rng(0)
    contexts = [[], [vocab.bos]] + [list(seqs[i][: rng.integers(0, len(seqs[i]))]) for i in rng.integers(0, 150, 40)]
    contexts += [list(rng.integers(vocab.n_specials, len(vocab), 2)) for _ in range(10)]
    for ctx in contexts:
        np.testing.assert_allclose(lm.distribution(ctx), oracle(ctx), rtol=0, atol=1e-12)


def test_unseen_context_is_unigram(windows, vocab):
    lm = train_ngram(windows[:100], vocab, order=2)
    far = [vocab.unk]
    d = lm.distribution(far)
    assert abs(d.sum() - 1) < 1e-12
    assert d[vocab.bos] == 0 and d[vocab.mask_id(1)] == 0


def test_merge_equals_single_pass(windows, vocab):
    whole = train_ngram(windows[:90], vocab)
    parts = [train_ngram(windows[i : i + 30], vocab) for i in (0, 30, 60)]
    merged = parts[0].merge(parts[1]).merge(parts[2])
    assert merged.ngrams == whole.ngrams
    with pytest.raises(ValueError):
        merged.merge(NgramLM(vocab, order=2))


def test_ngram_json_round_trip(windows, vocab, elon_vocab):
    lm = train_ngram(windows[:50], vocab)
    back = NgramLM.from_json(json.loads(json.dumps(lm.to_json())), vocab)
    np.testing.assert_array_equal(back.distribution([5, 6]), lm.distribution([5, 6]))
    with pytest.raises(ValueError, match="different vocabulary"):
        NgramLM.from_json(lm.to_json(), elon_vocab)


def test_ngram_bad_arguments(vocab):
    with pytest.raises(ValueError):
        NgramLM(vocab, order=0)
    with pytest.raises(ValueError, match="empty corpus"):
        train_ngram([], vocab)


def test_untrained_generator_not_ready(vocab, windows, rng):
    gen = NgramGenerator(NgramLM(vocab))
    mask = mask_from_spans(windows[0], [(1, 1)])
    with pytest.raises(RuntimeError, match="generator not ready"):
        generate_spans(gen, mask, GenConfig(), rng, vocab)


def test_ngram_generator_nll_is_full_distribution(windows, vocab):
    lm = train_ngram(windows, vocab)
    oracle = backoff_oracle([w.ids for w in windows], vocab, 3, 0.4)
    gen = NgramGenerator(lm)
    cfg = GenConfig(max_gen_len=5)
    for w in windows[:20]:
        if len(w) < 6:
            continue
        mask = sample_spans(w, derive_rng(0, "m", w.doc_id))
        out = generate_spans(gen, mask, cfg, derive_rng(0, "g", w.doc_id), vocab)
        ctx, pos = [], 0
        for sp, o in zip(mask.spans, out.spans):
            assert len(o.imperfect_ids) <= cfg.max_gen_len
            ctx += list(w.ids[pos : sp.start])
            for tid, x in zip(o.imperfect_ids, o.nll):
                assert x == pytest.approx(-math.log(oracle(ctx)[tid]), abs=1e-9)
                ctx.append(tid)
            pos = sp.end


# --- simple generators -------------------------------------------------------


def test_identity_generator(windows, vocab, rng):
    mask = sample_spans(windows[3], rng)
    out = generate_spans(IdentityGenerator(), mask, GenConfig(), rng, vocab)
    for sp, o in zip(mask.spans, out.spans):
        assert o.imperfect_ids == sp.gt_ids and o.is_exact_copy
        assert all(x == 0.0 for x in o.nll)


def test_scripted_elon(elon_vocab, elon_seq, rng):
    mask = mask_from_spans(elon_seq, [(1, 1), (5, 1), (8, 3)])
    ids = lambda s: [elon_vocab.id_of[t] for t in s.split()]
    gen = ScriptedGenerator([ids("2001"), ids("joined"), ids("a manufacturer")], [[1.84], [2.63], [0.71, 1.52]])
    out = generate_spans(gen, mask, GenConfig(), rng, elon_vocab)
    assert [words(o.imperfect_ids, elon_vocab) for o in out.spans] == [["2001"], ["joined"], ["a", "manufacturer"]]
    assert out.total_nll() == pytest.approx(6.7)
    assert not any(o.is_exact_copy for o in out.spans)


def test_output_validation(elon_vocab, elon_seq):
    mask = mask_from_spans(elon_seq, [(1, 1)])
    gt = mask.spans[0].gt_ids
    with pytest.raises(ValueError, match="spans for"):
        GeneratorOutput([]).validate(mask, elon_vocab)
    with pytest.raises(ValueError, match="special id"):
        GeneratorOutput([span_output([elon_vocab.mask_id(1)], [0.0], gt)]).validate(mask, elon_vocab)
    with pytest.raises(ValueError, match="invalid nll"):
        GeneratorOutput([span_output(gt, [-1.0], gt)]).validate(mask, elon_vocab)
    # UNK is a legal emission
    GeneratorOutput([span_output([elon_vocab.unk], [3.0], gt)]).validate(mask, elon_vocab)


# --- rule noise ----------------------------------------------------------------


def test_rule_noise_extremes(vocab, rng):
    ids = list(range(10, 40))
    assert noise_tokens(ids, NoiseConfig(0, 0, 0, 0), rng, vocab) == (ids, 0)
    assert noise_tokens(ids, NoiseConfig(1.0, 0, 0, 0), rng, vocab) == ([], 30)
    dup, n = noise_tokens(ids, NoiseConfig(0, 0, 0, 1.0), rng, vocab)
    assert dup == [t for t in ids for _ in (0, 1)] and n == 30


def test_rule_noise_replace_rate(vocab):
    rng = np.random.default_rng(5)
    ids = list(rng.integers(vocab.n_specials, len(vocab), 20_000))
    out, n = noise_tokens(ids, NoiseConfig(0, 0.1, 0, 0), rng, vocab)
    changed = sum(a != b for a, b in zip(ids, out))
    assert changed == n
    assert abs(changed / len(ids) - 0.1) < 0.01
    assert all(not vocab.is_special(t) for t in out)


@pytest.mark.parametrize(
    "cfg",
    [NoiseConfig(), NoiseConfig(0.1, 0.1, 0.0, 0.05), NoiseConfig(0.04, 0.04, 0.04, 0.02), NoiseConfig(0.2, 0.2, 0.2, 0.1)],
)
def test_expected_edit_rate_matches_levenshtein(vocab, cfg):
    rng = np.random.default_rng(11)
    dist, toks = 0, 0
    for _ in range(400):
        ids = list(rng.integers(vocab.n_specials, len(vocab), 50))
        out, _ = noise_tokens(ids, cfg, rng, vocab)
        dist += levenshtein(ids, out)
        toks += len(ids)
    assert abs(dist / toks - expected_edit_rate(cfg)) < 0.02


def test_rule_generator_pseudo_nll(windows, vocab):
    gen = RuleNoiseGenerator(vocab, NoiseConfig(0.2, 0.2, 0.2, 0.2))
    rng = np.random.default_rng(3)
    for w in windows[:50]:
        if len(w) < 4:
            continue
        mask = sample_spans(w, rng)
        out = generate_spans(gen, mask, GenConfig(), rng, vocab)
        for o in out.spans:
            assert len(set(o.nll)) <= 1
            if o.is_exact_copy:
                assert all(x == 0 for x in o.nll)


# --- external process ----------------------------------------------------------


def _side_file(tmp_path, masks, vocab, extra=None):
    table = {m.seq.doc_id: [words(sp.gt_ids, vocab) for sp in m.spans] for m in masks}
    table.update(extra or {})
    path = tmp_path / "spans.json"
    path.write_text(json.dumps(table))
    return path


def test_external_request_format(elon_vocab, elon_seq, tmp_path):
    mask = mask_from_spans(elon_seq, [(1, 1), (5, 1), (8, 3)])
    side = _side_file(tmp_path, [mask], elon_vocab)
    with ExternalGenerator([sys.executable, str(STUB), str(side)], elon_vocab) as gen:
        req = gen.request(mask)
    assert req == {
        "id": "elon",
        "masked": "In M_1 , Elon Musk M_2 SpaceX , M_3 company .".split(),
        "n_spans": 3,
    }


def test_external_echo_equals_identity(windows, vocab, tmp_path):
    rng = np.random.default_rng(8)
    masks = [sample_spans(w, rng) for w in windows[:30] if len(w) >= 2]
    side = _side_file(tmp_path, masks, vocab)
    with ExternalGenerator([sys.executable, str(STUB), str(side)], vocab) as gen:
        for m in masks:
            got = generate_spans(gen, m, GenConfig(), rng, vocab)
            want = generate_spans(IdentityGenerator(), m, GenConfig(), rng, vocab)
            # out-of-vocabulary words come back as UNK, which the corpus ids already are
            assert got == want


@pytest.mark.parametrize(
    "mode, message",
    [("garbage", "malformed response"), ("no-nll", "needs 'tokens' and 'nll'"), ("exit", "exited")],
)
def test_external_errors(mode, message, elon_vocab, elon_seq, tmp_path, rng):
    mask = mask_from_spans(elon_seq, [(1, 1)])
    side = _side_file(tmp_path, [mask], elon_vocab)
    with ExternalGenerator([sys.executable, str(STUB), str(side), "--mode", mode], elon_vocab) as gen:
        with pytest.raises(ExternalGeneratorError, match=message):
            gen.fill(mask, GenConfig(), rng)


def test_external_timeout(elon_vocab, elon_seq, tmp_path, rng):
    mask = mask_from_spans(elon_seq, [(1, 1)])
    side = _side_file(tmp_path, [mask], elon_vocab)
    gen = ExternalGenerator([sys.executable, str(STUB), str(side), "--mode", "sleep"], elon_vocab, timeout=0.5)
    try:
        with pytest.raises(ExternalGeneratorError, match="timeout"):
            gen.fill(mask, GenConfig(), rng)
    finally:
        gen.proc.kill()
        gen.close()


def test_external_wrong_span_count(elon_vocab, elon_seq, tmp_path, rng):
    mask = mask_from_spans(elon_seq, [(1, 1), (5, 1)])
    side = _side_file(tmp_path, [], elon_vocab, {"elon": [["x"]]})
    with ExternalGenerator([sys.executable, str(STUB), str(side)], elon_vocab) as gen:
        with pytest.raises(ExternalGeneratorError, match="wrong span count"):
            gen.fill(mask, GenConfig(), rng)
