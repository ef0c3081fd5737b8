import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spanrewrite.corpus import TokenSeq, build_vocab, tokenize
from spanrewrite.generators import NoiseConfig, expected_edit_rate
from spanrewrite.kernels import levenshtein
from spanrewrite.model import Checkpoint, ModelConfig, init_params
from spanrewrite.synth import synthetic_corpus
from spanrewrite.tasks import (
    Edit,
    align_edits,
    apply_edits,
    edit_f_beta,
    evaluate,
    f_beta,
    make_synth_gec,
    prf_from_counts,
    rouge_l,
    score_hypotheses,
    source_payload,
    target_payload,
)

seqs = st.lists(st.integers(0, 6), max_size=25)


def dp_distance(a, b):
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        for j in range(1, len(b) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1]))
        prev = cur
    return prev[-1]


def dp_lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            table[i + 1][j + 1] = table[i][j] + 1 if a[i] == b[j] else max(table[i][j + 1], table[i + 1][j])
    return table[-1][-1]


def test_go_went_single_substitution():
    words = "I go to school yesterday . went".split()
    ids = {w: i for i, w in enumerate(words)}
    src = [ids[w] for w in "I go to school yesterday .".split()]
    hyp = [ids[w] for w in "I went to school yesterday .".split()]
    assert align_edits(src, hyp) == [Edit(1, "substitute", (ids["went"],))]
    assert align_edits(src, src) == []


def test_edit_positions_and_types():
    assert align_edits([1, 2, 3], [1, 3]) == [Edit(1, "delete", (2,))]
    assert align_edits([1, 3], [1, 2, 3]) == [Edit(1, "insert", (2,))]
    assert align_edits([1], [1, 9]) == [Edit(1, "insert", (9,))]
    # substitute is preferred to a delete+insert pair of equal cost
    assert align_edits([5], [6]) == [Edit(0, "substitute", (6,))]
    # leftmost deletion among equivalent choices
    assert align_edits([7, 7, 7], [7, 7]) == [Edit(0, "delete", (7,))]


def test_reference_f05_triple():
    p, r = 0.691, 0.337
    assert f_beta(p, r) * 100 == pytest.approx(57.1, abs=0.05)


@pytest.mark.parametrize("x", np.linspace(0.0, 1.0, 21))
def test_equal_precision_recall_is_fixed_point(x):
    assert f_beta(x, x) == pytest.approx(x, abs=1e-12)


def test_f05_weights_precision():
    grid = np.linspace(0.05, 1.0, 20)
    for p in grid:
        for r in grid:
            if p > r:
                assert f_beta(p, r, 0.5) > f_beta(p, r, 1.0)
            elif p < r:
                assert f_beta(p, r, 0.5) < f_beta(p, r, 1.0)


def test_edit_f_beta_conventions():
    e = [Edit(0, "substitute", (1,)), Edit(3, "delete", (4,))]
    assert edit_f_beta(e, e) == (1.0, 1.0, 1.0)
    assert edit_f_beta([], []) == (1.0, 1.0, 1.0)
    assert edit_f_beta([], e) == (0.0, 0.0, 0.0)
    assert edit_f_beta(e, []) == (0.0, 0.0, 0.0)
    # one of two hypothesis edits correct, one of two references found
    p, r, f = edit_f_beta([e[0], Edit(5, "insert", (2,))], e)
    assert (p, r, f) == (0.5, 0.5, 0.5)
    # matches must agree on tokens, not only positions
    assert edit_f_beta([Edit(0, "substitute", (2,))], e[:1])[0] == 0.0
    assert prf_from_counts(3, 4, 6) == pytest.approx((0.75, 0.5, f_beta(0.75, 0.5)))


def test_edit_count_matches_dp_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = list(rng.integers(0, 5, rng.integers(0, 20)))
        b = list(rng.integers(0, 5, rng.integers(0, 20)))
        assert len(align_edits(a, b)) == dp_distance(a, b) == levenshtein(a, b)


def test_lcs_matches_dp_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        a = list(rng.integers(0, 6, rng.integers(1, 31)))
        b = list(rng.integers(0, 6, rng.integers(1, 31)))
        lcs = dp_lcs(a, b)
        res = rouge_l(a, b)
        assert res["p"] == pytest.approx(lcs / len(a)) and res["r"] == pytest.approx(lcs / len(b))


def test_rouge_l_edges():
    assert rouge_l([1, 2], [1, 2])["f"] == 1.0
    assert rouge_l([1, 2], [3, 4])["f"] == 0.0
    assert rouge_l([], [])["f"] == 1.0
    assert rouge_l([], [1])["f"] == 0.0


@settings(max_examples=300, deadline=None)
@given(a=seqs, b=seqs)
def test_apply_align_round_trip(a, b):
    assert apply_edits(a, align_edits(a, b)) == b


def test_apply_rejects_conflicting_edits():
    with pytest.raises(ValueError):
        apply_edits([1, 2], [Edit(0, "delete", (1,)), Edit(0, "substitute", (3,))])


# --- synthetic GEC ---------------------------------------------------------------


@pytest.fixture(scope="module")
def gec_corpus():
    sents = synthetic_corpus(10_000, seed=31)
    vocab = build_vocab(sents, max_size=800)
    docs = [TokenSeq(tokenize(s, vocab).ids, f"g{i:05d}") for i, s in enumerate(sents)]
    return docs, vocab


def test_zero_noise_copies(gec_corpus):
    docs, vocab = gec_corpus
    splits = make_synth_gec(docs[:200], vocab, NoiseConfig(0, 0, 0, 0), seed=0)
    for rows in splits.values():
        for ex in rows:
            assert source_payload(ex, vocab) == target_payload(ex, vocab)


def test_splits_partition_documents(gec_corpus):
    docs, vocab = gec_corpus
    # windows of one document share the prefix before the dot
    multi = [TokenSeq(d.ids, f"{d.doc_id[:5]}.{i % 3}") for i, d in enumerate(docs[:600])]
    splits = make_synth_gec(multi, vocab, NoiseConfig(), seed=4)
    owner = {}
    for name, rows in splits.items():
        for ex in rows:
            assert owner.setdefault(ex.id.split(".")[0], name) == name
    assert sum(len(v) for v in splits.values()) == 600
    assert {k: len(v) for k, v in splits.items()} == {
        k: len(v) for k, v in make_synth_gec(multi, vocab, NoiseConfig(), seed=4).items()
    }


def test_split_sizes_and_determinism(gec_corpus):
    docs, vocab = gec_corpus
    a = make_synth_gec(docs[:1000], vocab, NoiseConfig(), seed=1)
    assert [len(a[k]) for k in ("train", "dev", "test")] == [800, 100, 100]
    b = make_synth_gec(list(reversed(docs[:1000])), vocab, NoiseConfig(), seed=1)
    assert a == b
    c = make_synth_gec(docs[:1000], vocab, NoiseConfig(), seed=2)
    assert {e.id for e in c["test"]} != {e.id for e in a["test"]}
    with pytest.raises(ValueError):
        make_synth_gec(docs[:10], vocab, NoiseConfig(), seed=0, split=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        make_synth_gec([], vocab, NoiseConfig(), seed=0)


def test_corruption_rate(gec_corpus):
    docs, vocab = gec_corpus
    cfg = NoiseConfig(0.04, 0.04, 0.04, 0.02)
    splits = make_synth_gec(docs, vocab, cfg, seed=3)
    rows = [ex for v in splits.values() for ex in v]
    assert len(rows) == 10_000
    rate = np.mean(
        [levenshtein(source_payload(ex, vocab), target_payload(ex, vocab)) / len(target_payload(ex, vocab)) for ex in rows]
    )
    assert abs(rate - expected_edit_rate(cfg)) < 0.02


def test_copy_baseline_and_perfect_scores(gec_corpus):
    docs, vocab = gec_corpus
    test = make_synth_gec(docs[:500], vocab, NoiseConfig(), seed=5)["test"]
    sources = [source_payload(ex, vocab) for ex in test]
    refs = [target_payload(ex, vocab) for ex in test]
    copy = score_hypotheses(sources, sources, refs)
    assert copy["f05"] == 0.0 and copy["r"] == 0.0
    perfect = score_hypotheses(sources, refs, refs)
    assert perfect["exact_match"] == 1.0 and perfect["f05"] == 1.0 and perfect["rouge_l"] == 1.0


def test_evaluate_report_is_deterministic(gec_corpus):
    docs, vocab = gec_corpus
    test = make_synth_gec(docs[:100], vocab, NoiseConfig(), seed=6)["test"]
    cfg = ModelConfig(vocab_size=len(vocab), n_layers=1, d_model=16, d_ff=16, max_decode_len=20)
    ck = Checkpoint(cfg, init_params(cfg, np.random.default_rng(0)), meta={"vocab": vocab.fingerprint()})
    a = evaluate(ck, test, vocab, name="rand")
    assert a == evaluate(ck, test, vocab, name="rand")
    assert a["n_examples"] == len(test) and a["checkpoint"] == "rand"
    assert set(a["metrics"]) == {"exact_match", "p", "r", "f05", "rouge_l"}
    other = build_vocab(["a b c"], max_size=200)
    with pytest.raises(ValueError, match="vocabulary"):
        evaluate(ck, test, other)
