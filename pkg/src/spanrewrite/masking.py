"""Span sampling over token windows and the text-infilling (mask sentinel) format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import TokenSeq, Vocab


@dataclass(frozen=True)
class Span:
    index: int
    start: int
    length: int
    gt_ids: tuple[int, ...]

    def __post_init__(self):
        if self.length != len(self.gt_ids):
            raise ValueError("span length does not match its ground-truth tokens")
        if self.length < 0:
            raise ValueError("negative span length")

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class SpanMask:
    spans: list[Span]
    seq: TokenSeq
    # every Poisson draw taken while sampling, before clamping; diagnostics only
    raw_lengths: list[int] = field(default_factory=list, compare=False, repr=False)

    def masked_tokens(self) -> int:
        return sum(s.length for s in self.spans)

    def validate(self) -> None:
        n = len(self.seq)
        prev_end = None
        for k, sp in enumerate(self.spans, 1):
            if sp.index != k:
                raise ValueError("sentinel indices are not 1..n in order")
            if sp.start < 0 or sp.end > n:
                raise ValueError("span outside the sequence")
            if tuple(self.seq.ids[sp.start : sp.end]) != sp.gt_ids:
                raise ValueError("span tokens do not match the sequence")
            if prev_end is not None and sp.start < prev_end + 1:
                raise ValueError("spans overlap or touch")
            prev_end = sp.end


@dataclass
class MaskConfig:
    lam: float = 3.0
    budget: float = 0.30
    max_span_len: int = 10
    max_spans: int = 40
    hard_cap: float = 0.35
    max_insert_frac: float = 0.2
    attempts: int = 50


def poisson_sample(rng: np.random.Generator, lam: float) -> int:
    """Exact Poisson draw by CDF inversion from one uniform."""
    if not lam > 0:
        raise ValueError("Poisson rate must be positive")
    u = rng.random()
    k = 0
    p = math.exp(-lam)
    cdf = p
    # cdf saturates near 1.0 in floating point; the k bound guards that tail
    while u > cdf and k < 10_000:
        k += 1
        p *= lam / k
        cdf += p
    return k


def _legal(spans: list[Span], start: int, length: int) -> bool:
    end = start + length
    for sp in spans:
        # at least one unmasked token must separate two spans
        if start < sp.end + 1 and sp.start < end + 1:
            return False
    return True


def _legal_starts(spans: list[Span], n: int, length: int) -> list[int]:
    return [s for s in range(0, n - length + 1) if _legal(spans, s, length)]


def sample_spans(seq: TokenSeq, rng: np.random.Generator, cfg: MaskConfig | None = None) -> SpanMask:
    """Sample non-adjacent spans until about ``budget`` of the tokens are covered.

    Lengths are Poisson(``lam``) clamped to ``max_span_len``, to the hard cap
    on covered tokens and to the budget still open (rounded to a token). A zero length is an insertion point; it costs one
    unit of budget and insertions are limited to ``max_insert_frac`` of spans.
    Starts are rejection-sampled; after ``attempts`` misses the remaining
    legal starts are enumerated, shrinking the length until one fits.
    """
    cfg = cfg or MaskConfig()
    n = len(seq)
    if n < 2:
        raise ValueError("sequence too short")
    target_units = cfg.budget * n
    cap = math.ceil(cfg.hard_cap * n)
    spans: list[Span] = []
    raw: list[int] = []
    units = 0
    masked = 0
    n_insert = 0
    # stop once the budget is met to the nearest token
    while units + 0.5 < target_units and len(spans) < cfg.max_spans and masked < cap:
        length = poisson_sample(rng, cfg.lam)
        raw.append(length)
        # trim the closing span so the total lands on the budget instead of overshooting it
        length = min(length, cfg.max_span_len, cap - masked, math.floor(target_units - units + 0.5))
        if length == 0 and (n_insert + 1) > cfg.max_insert_frac * (len(spans) + 1):
            continue
        start = None
        for _ in range(cfg.attempts):
            s = int(rng.integers(0, n - length + 1))
            if _legal(spans, s, length):
                start = s
                break
        while start is None:
            cands = _legal_starts(spans, n, length)
            if cands:
                start = cands[int(rng.integers(0, len(cands)))]
            elif length > 1:
                length -= 1
            else:
                break
        if start is None:
            break
        spans.append(Span(0, start, length, tuple(seq.ids[start : start + length])))
        units += max(length, 1)
        masked += length
        n_insert += length == 0
    spans.sort(key=lambda sp: sp.start)
    spans = [Span(k, sp.start, sp.length, sp.gt_ids) for k, sp in enumerate(spans, 1)]
    return SpanMask(spans, seq, raw)


def apply_mask(mask: SpanMask, vocab: Vocab) -> tuple[TokenSeq, TokenSeq]:
    """Replace each span by its mask sentinel; target is ``M_1 gt_1 M_2 gt_2 ...``."""
    if len(mask.spans) > vocab.max_sentinels:
        raise ValueError("too many spans")
    ids = mask.seq.ids
    source: list[int] = []
    target: list[int] = []
    pos = 0
    for sp in mask.spans:
        source.extend(ids[pos : sp.start])
        source.append(vocab.mask_id(sp.index))
        target.append(vocab.mask_id(sp.index))
        target.extend(sp.gt_ids)
        pos = sp.end
    source.extend(ids[pos:])
    return TokenSeq(tuple(source), mask.seq.doc_id), TokenSeq(tuple(target), mask.seq.doc_id)


def mask_from_spans(seq: TokenSeq, spans: list[tuple[int, int]]) -> SpanMask:
    """Build a SpanMask from explicit ``(start, length)`` pairs."""
    out = [
        Span(k, start, length, tuple(seq.ids[start : start + length]))
        for k, (start, length) in enumerate(sorted(spans), 1)
    ]
    mask = SpanMask(out, seq)
    mask.validate()
    return mask
