"""Synthetic rewriting tasks and their metrics.

Edit-based F0.5 uses a token-level Levenshtein alignment against the source
instead of the full M2 edit lattice; matching edits must agree in position,
type and tokens. ROUGE-L is LCS-based with a plain F1 combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .corpus import TokenSeq, Vocab
from .dataset import SSRExample, build_finetune_example
from .generators import NoiseConfig, noise_tokens
from .rng import derive_rng, key_int


@dataclass(frozen=True)
class Edit:
    position: int
    type: str  # "insert" | "delete" | "substitute"
    tokens: tuple[int, ...]


def align_edits(source: Sequence[int], hypothesis: Sequence[int]) -> list[Edit]:
    """Minimal token edit script from ``source`` to ``hypothesis``.

    Ties prefer substitute over delete over insert, and indels go leftmost.
    Positions index ``source``; an insert at ``i`` goes before ``source[i]``.
    """
    edits = []
    for op, i, j in kernels.edit_ops(list(source), list(hypothesis)):
        if op == kernels.SUBSTITUTE:
            edits.append(Edit(i, "substitute", (hypothesis[j],)))
        elif op == kernels.DELETE:
            edits.append(Edit(i, "delete", (source[i],)))
        elif op == kernels.INSERT:
            edits.append(Edit(i, "insert", (hypothesis[j],)))
    return edits


def apply_edits(source: Sequence[int], edits: Sequence[Edit]) -> list[int]:
    inserts: dict[int, list[int]] = {}
    changes: dict[int, Edit] = {}
    for e in edits:
        if e.type == "insert":
            inserts.setdefault(e.position, []).extend(e.tokens)
        elif e.position in changes:
            raise ValueError(f"two edits on source position {e.position}")
        else:
            changes[e.position] = e
    out: list[int] = []
    for i in range(len(source) + 1):
        out.extend(inserts.get(i, ()))
        if i == len(source):
            break
        e = changes.get(i)
        if e is None:
            out.append(source[i])
        elif e.type == "substitute":
            out.extend(e.tokens)
    return out


def f_beta(p: float, r: float, beta: float = 0.5) -> float:
    b2 = beta * beta
    denom = b2 * p + r
    return (1 + b2) * p * r / denom if denom > 0 else 0.0


def edit_counts(hyp_edits: Sequence[Edit], ref_edits: Sequence[Edit]) -> tuple[int, int, int]:
    """(matched, |hyp|, |ref|) with multiset matching."""
    pool: dict[Edit, int] = {}
    for e in ref_edits:
        pool[e] = pool.get(e, 0) + 1
    matched = 0
    for e in hyp_edits:
        if pool.get(e, 0) > 0:
            pool[e] -= 1
            matched += 1
    return matched, len(hyp_edits), len(ref_edits)


def prf_from_counts(matched: int, n_hyp: int, n_ref: int, beta: float = 0.5) -> tuple[float, float, float]:
    if n_hyp == 0 and n_ref == 0:
        return 1.0, 1.0, 1.0
    p = matched / n_hyp if n_hyp else 0.0
    r = matched / n_ref if n_ref else 0.0
    return p, r, f_beta(p, r, beta)


def edit_f_beta(hyp_edits, ref_edits, beta: float = 0.5) -> tuple[float, float, float]:
    return prf_from_counts(*edit_counts(hyp_edits, ref_edits), beta=beta)


def rouge_l(hyp: Sequence[int], ref: Sequence[int]) -> dict[str, float]:
    if not hyp and not ref:
        return {"p": 1.0, "r": 1.0, "f": 1.0}
    if not hyp or not ref:
        return {"p": 0.0, "r": 0.0, "f": 0.0}
    lcs = kernels.lcs_length(list(hyp), list(ref))
    p, r = lcs / len(hyp), lcs / len(ref)
    return {"p": p, "r": r, "f": f_beta(p, r, 1.0)}


# ---------------------------------------------------------------------------
# synthetic GEC


def make_synth_gec(
    docs: Sequence[TokenSeq],
    vocab: Vocab,
    noise: NoiseConfig,
    seed: int,
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> dict[str, list[SSRExample]]:
    """Noised-source -> clean-target pairs, split disjointly by document."""
    if not docs:
        raise ValueError("empty corpus")
    if any(x < 0 for x in split) or not math.isclose(sum(split), 1.0):
        raise ValueError("split ratios must be non-negative and sum to 1")
    by_doc: dict[str, list[TokenSeq]] = {}
    for w in docs:
        by_doc.setdefault(w.doc_id.split(".")[0], []).append(w)
    # seed-keyed shuffle of document ids
    doc_ids = sorted(by_doc, key=lambda d: (key_int(f"{seed}:{d}"), d))
    n = len(doc_ids)
    n_train = int(round(split[0] * n))
    n_dev = int(round(split[1] * n))
    parts = {
        "train": doc_ids[:n_train],
        "dev": doc_ids[n_train : n_train + n_dev],
        "test": doc_ids[n_train + n_dev :],
    }
    out: dict[str, list[SSRExample]] = {}
    for name, ids in parts.items():
        rows = []
        for d in sorted(ids):
            for w in by_doc[d]:
                src, _ = noise_tokens(w.ids, noise, derive_rng(seed, "gec", w.doc_id), vocab)
                if not src:
                    src = list(w.ids[:1])
                rows.append(build_finetune_example(src, w.ids, vocab, ex_id=w.doc_id))
        out[name] = rows
    return out


# ---------------------------------------------------------------------------
# evaluation


def strip_sentinels(ids: Sequence[int], vocab: Vocab) -> list[int]:
    return [t for t in ids if not vocab.is_special(t) or t == vocab.unk]


def source_payload(ex: SSRExample, vocab: Vocab) -> list[int]:
    return strip_sentinels(ex.source_ids, vocab)


def target_payload(ex: SSRExample, vocab: Vocab) -> list[int]:
    return strip_sentinels(ex.target_ids, vocab)


def score_hypotheses(
    sources: Sequence[Sequence[int]],
    hyps: Sequence[Sequence[int]],
    refs: Sequence[Sequence[int]],
    metrics: Sequence[str] = ("exact_match", "f05", "rouge_l"),
) -> dict[str, float]:
    """Corpus-level metrics; F0.5 pools edit counts over all examples."""
    out: dict[str, float] = {}
    n = len(refs)
    if "exact_match" in metrics:
        out["exact_match"] = sum(list(h) == list(r) for h, r in zip(hyps, refs)) / n if n else 0.0
    if "f05" in metrics:
        tot = np.zeros(3, dtype=np.int64)
        for s, h, r in zip(sources, hyps, refs):
            tot += edit_counts(align_edits(s, h), align_edits(s, r))
        p, r, f = prf_from_counts(*tot.tolist())
        out.update({"p": p, "r": r, "f05": f})
    if "rouge_l" in metrics:
        vals = [rouge_l(list(h), list(r))["f"] for h, r in zip(hyps, refs)]
        out["rouge_l"] = float(np.mean(vals)) if vals else 0.0
    return out


def decode_payloads(params, cfg, examples: Sequence[SSRExample], vocab: Vocab, batch: int = 128) -> list[list[int]]:
    from .model import greedy_batch

    out: list[list[int]] = []
    for lo in range(0, len(examples), batch):
        part = examples[lo : lo + batch]
        for ids in greedy_batch(params, cfg, [list(ex.source_ids) for ex in part]):
            out.append(strip_sentinels(ids, vocab))
    return out


def evaluate(ckpt, test: Sequence[SSRExample], vocab: Vocab, metrics=("exact_match", "f05", "rouge_l"), name: str = "") -> dict:
    """Greedy-decode every test source and score it, alongside the copy baseline."""
    if ckpt.config.vocab_size != len(vocab) or ckpt.meta.get("vocab", vocab.fingerprint()) != vocab.fingerprint():
        raise ValueError("checkpoint vocabulary does not match the task vocabulary")
    sources = [source_payload(ex, vocab) for ex in test]
    refs = [target_payload(ex, vocab) for ex in test]
    hyps = decode_payloads(ckpt.params, ckpt.config, test, vocab)
    return {
        "checkpoint": name,
        "task": "synthetic_gec",
        "n_examples": len(test),
        "metrics": score_hypotheses(sources, hyps, refs, metrics),
        "copy_baseline": score_hypotheses(sources, sources, refs, metrics),
    }
