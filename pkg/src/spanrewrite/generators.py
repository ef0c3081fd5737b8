"""Imperfect span generators and the shared nucleus sampler.

Every generator fills the spans of a :class:`~spanrewrite.masking.SpanMask`
and reports, for each emitted token, its negative log-likelihood (nats)
under the generator's full, untruncated next-token distribution.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import subprocess
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import TokenSeq, Vocab
from .masking import SpanMask, poisson_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpanOutput:
    imperfect_ids: tuple[int, ...]
    nll: tuple[float, ...]
    is_exact_copy: bool


@dataclass
class GeneratorOutput:
    spans: list[SpanOutput]

    def total_nll(self) -> float:
        return math.fsum(x for s in self.spans for x in s.nll)

    def validate(self, mask: SpanMask, vocab: Vocab) -> None:
        if len(self.spans) != len(mask.spans):
            raise ValueError(
                f"generator produced {len(self.spans)} spans for {len(mask.spans)} masked spans"
            )
        for sp, out in zip(mask.spans, self.spans):
            if len(out.nll) != len(out.imperfect_ids):
                raise ValueError(f"span {sp.index}: nll/token length mismatch")
            for x in out.nll:
                if not (math.isfinite(x) and x >= 0.0):
                    raise ValueError(f"span {sp.index}: invalid nll value {x!r}")
            for tid in out.imperfect_ids:
                if not 0 <= tid < len(vocab) or (vocab.is_special(tid) and tid != vocab.unk):
                    raise ValueError(f"span {sp.index}: generator emitted special id {tid}")
            if out.is_exact_copy != (tuple(out.imperfect_ids) == tuple(sp.gt_ids)):
                raise ValueError(f"span {sp.index}: is_exact_copy flag is wrong")


@dataclass
class GenConfig:
    p: float = 0.9
    max_gen_len: int = 12
    lam: float = 3.0


@dataclass
class NoiseConfig:
    p_delete: float = 0.1
    p_replace: float = 0.1
    p_shuffle: float = 0.1
    p_duplicate: float = 0.05


def span_output(ids: Sequence[int], nll: Sequence[float], gt: Sequence[int]) -> SpanOutput:
    ids = tuple(int(t) for t in ids)
    return SpanOutput(ids, tuple(float(x) for x in nll), ids == tuple(gt))


# ---------------------------------------------------------------------------
# nucleus sampling


def _check_dist(dist) -> np.ndarray:
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 1 or d.size == 0 or not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("invalid distribution")
    if abs(d.sum() - 1.0) > 1e-6:
        raise ValueError("invalid distribution")
    return d


def nucleus(dist, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Token ids of the top-p nucleus (probability-descending, ties by id) and their renormalized mass."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"nucleus threshold must be in (0, 1], got {p}")
    d = _check_dist(dist)
    order = np.lexsort((np.arange(d.size), -d))
    cum = np.cumsum(d[order])
    # smallest prefix whose mass reaches p; the slack absorbs cumsum rounding
    size = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    size = min(size, d.size)
    keep = order[:size]
    mass = d[keep]
    return keep, mass / mass.sum()


def nucleus_sample(dist, p: float, rng: np.random.Generator, size: int | None = None):
    """Sample from the top-p nucleus of ``dist``.

    Returns ``(token_id, prob)`` where ``prob`` is the token's probability
    under the original distribution. With ``size`` set, returns arrays.
    """
    d = np.asarray(dist, dtype=np.float64)
    keep, probs = nucleus(d, p)
    cdf = np.cumsum(probs)
    u = rng.random(size)
    pos = np.minimum(np.searchsorted(cdf, u, side="right"), keep.size - 1)
    ids = keep[pos]
    if size is None:
        tid = int(ids)
        return tid, float(d[tid])
    return ids, d[ids]


# ---------------------------------------------------------------------------
# n-gram language model


class NgramLM:
    """Word n-gram model scored with stupid backoff.

    ``score(t | ctx)`` is the relative frequency of ``ctx t`` when that n-gram
    was observed, otherwise ``alpha * score(t | ctx[1:])``; the unigram level
    is add-one smoothed over the generator's support (UNK plus corpus words).
    Scores are renormalized into a distribution at query time.
    """

    def __init__(self, vocab: Vocab, order: int = 3, alpha: float = 0.4):
        if order < 1:
            raise ValueError("n-gram order must be >= 1")
        if not alpha > 0:
            raise ValueError("backoff factor must be positive")
        self.vocab = vocab
        self.order = order
        self.alpha = alpha
        # ngrams[k] counts (k+1)-grams as (context..., token) tuples
        self.ngrams: list[Counter] = [Counter() for _ in range(order)]
        self.support = np.array(vocab.content_ids(), dtype=np.int64)
        self._tables = None

    @property
    def ready(self) -> bool:
        return sum(self.ngrams[0].values()) > 0

    def _pad(self, ids: Sequence[int]) -> list[int]:
        return [self.vocab.bos] * (self.order - 1) + list(ids)

    def update(self, seq: Sequence[int]) -> None:
        padded = self._pad(seq)
        h = self.order - 1
        for i in range(h, len(padded)):
            for k in range(self.order):
                self.ngrams[k][tuple(padded[i - k : i + 1])] += 1
        self._tables = None

    def merge(self, other: "NgramLM") -> "NgramLM":
        if other.order != self.order:
            raise ValueError("cannot merge models of different order")
        for mine, theirs in zip(self.ngrams, other.ngrams):
            mine.update(theirs)
        self._tables = None
        return self

    def _build(self) -> None:
        V = len(self.vocab)
        total = sum(self.ngrams[0].values())
        uni = np.zeros(V)
        for (t,), c in self.ngrams[0].items():
            uni[t] = c
        floor = np.zeros(V)
        floor[self.support] = (uni[self.support] + 1.0) / (total + self.support.size)
        tables: list[dict] = [dict() for _ in range(self.order)]
        for k in range(1, self.order):
            grouped: dict[tuple, list] = {}
            for gram, c in self.ngrams[k].items():
                grouped.setdefault(gram[:-1], []).append((gram[-1], c))
            for ctx, items in grouped.items():
                items.sort()
                ids = np.array([t for t, _ in items], dtype=np.int64)
                cnt = np.array([c for _, c in items], dtype=np.float64)
                tables[k][ctx] = (ids, cnt / cnt.sum())
        self._unigram = floor
        self._tables = tables

    def _scores(self, context: Sequence[int]) -> np.ndarray:
        if not self.ready:
            raise RuntimeError("generator not ready")
        if self._tables is None:
            self._build()
        n = self.order
        padded = self._pad(context)
        scores = self._unigram * self.alpha ** (n - 1)
        for k in range(1, n):
            ctx = tuple(padded[len(padded) - k :])
            hit = self._tables[k].get(ctx)
            if hit is not None:
                ids, rel = hit
                scores[ids] = rel * self.alpha ** (n - 1 - k)
        return scores

    def score(self, token: int, context: Sequence[int]) -> float:
        """Raw (unnormalized) stupid-backoff score."""
        return float(self._scores(context)[token])

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        s = self._scores(context)
        return s / s.sum()

    def to_json(self) -> dict:
        return {
            "order": self.order,
            "alpha": self.alpha,
            "vocab": self.vocab.fingerprint(),
            "ngrams": [sorted([list(g), c] for g, c in cnt.items()) for cnt in self.ngrams],
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocab) -> "NgramLM":
        if obj["vocab"] != vocab.fingerprint():
            raise ValueError("n-gram model was trained with a different vocabulary")
        lm = cls(vocab, obj["order"], obj["alpha"])
        for k, rows in enumerate(obj["ngrams"]):
            lm.ngrams[k] = Counter({tuple(g): c for g, c in rows})
        return lm


def train_ngram(corpus: Iterable[TokenSeq], vocab: Vocab, order: int = 3, alpha: float = 0.4) -> NgramLM:
    lm = NgramLM(vocab, order, alpha)
    for seq in corpus:
        lm.update(seq.ids)
    if not lm.ready:
        raise ValueError("empty corpus")
    return lm


# ---------------------------------------------------------------------------
# rule-based noise


def _noise_support(vocab: Vocab) -> np.ndarray:
    ids = np.arange(vocab.n_specials, len(vocab), dtype=np.int64)
    return ids if ids.size else np.array([vocab.unk], dtype=np.int64)


def noise_tokens(ids: Sequence[int], cfg: NoiseConfig, rng: np.random.Generator, vocab: Vocab):
    """Apply delete/replace/duplicate per token, then neighbour swaps.

    Returns the noised ids and the number of edit events applied.
    """
    support = _noise_support(vocab)
    out: list[int] = []
    edits = 0
    for t in ids:
        if cfg.p_delete > 0 and rng.random() < cfg.p_delete:
            edits += 1
            continue
        if cfg.p_replace > 0 and rng.random() < cfg.p_replace:
            pos = int(np.searchsorted(support, t))
            if pos < support.size and support[pos] == t and support.size > 1:
                # uniform over the other tokens, so a replacement always changes the token
                j = int(rng.integers(0, support.size - 1))
                t = int(support[j + (j >= pos)])
            else:
                t = int(support[rng.integers(0, support.size)])
            edits += 1
        out.append(int(t))
        if cfg.p_duplicate > 0 and rng.random() < cfg.p_duplicate:
            out.append(int(t))
            edits += 1
    if cfg.p_shuffle > 0:
        i = 0
        while i < len(out) - 1:
            if rng.random() < cfg.p_shuffle:
                out[i], out[i + 1] = out[i + 1], out[i]
                edits += 1
                i += 2
            else:
                i += 1
    return out, edits


def rule_noise(gt_ids: Sequence[int], cfg: NoiseConfig, rng: np.random.Generator, vocab: Vocab) -> SpanOutput:
    """Rule-noised copy of a span with an edit-count pseudo-NLL per token."""
    out, edits = noise_tokens(gt_ids, cfg, rng, vocab)
    per_token = edits / max(1, len(out))
    return span_output(out, [per_token] * len(out), gt_ids)


def expected_edit_rate(cfg: NoiseConfig) -> float:
    """Approximate token-level edit distance per input token.

    Exact when ``p_shuffle`` is 0, up to coincidental token collisions. A swap
    of two fresh tokens costs two substitutions; the alignment gets cheaper
    when a swap borders another swap, a duplicate pair, a replaced token or a
    deletion, and those savings are included to first order.
    """
    keep = 1.0 - cfg.p_delete
    dup = cfg.p_duplicate
    rate = cfg.p_delete + keep * cfg.p_replace + keep * dup
    # swaps start at a fraction q/(1+q) of output positions
    swaps = keep * (1.0 + dup) * cfg.p_shuffle / (1.0 + cfg.p_shuffle)
    per_swap = 2.0 - cfg.p_shuffle - 6.0 * dup / (1.0 + dup) - 2.0 * cfg.p_replace - 2.0 * cfg.p_delete
    return rate + swaps * max(per_swap, 0.0)


# ---------------------------------------------------------------------------
# generators


class SpanGenerator:
    """Base class; subclasses implement :meth:`fill`."""

    name = "base"

    @property
    def ready(self) -> bool:
        return True

    def fill(self, mask: SpanMask, cfg: GenConfig, rng: np.random.Generator) -> GeneratorOutput:
        raise NotImplementedError

    def fill_many(self, masks, cfg, rngs) -> list[GeneratorOutput]:
        return [self.fill(m, cfg, r) for m, r in zip(masks, rngs)]

    def close(self) -> None:
        pass


class IdentityGenerator(SpanGenerator):
    name = "identity"

    def fill(self, mask, cfg, rng):
        return GeneratorOutput([span_output(s.gt_ids, [0.0] * s.length, s.gt_ids) for s in mask.spans])


class ScriptedGenerator(SpanGenerator):
    """Replays fixed span fillings, e.g. hand-written examples."""

    name = "scripted"

    def __init__(self, spans: Sequence[Sequence[int]], nll: Sequence[Sequence[float]] | None = None):
        self.spans = [tuple(s) for s in spans]
        self.nll = [tuple(x) for x in nll] if nll is not None else [(0.0,) * len(s) for s in self.spans]

    def fill(self, mask, cfg, rng):
        if len(mask.spans) != len(self.spans):
            raise ValueError("scripted generator does not match the mask")
        return GeneratorOutput(
            [span_output(ids, x, sp.gt_ids) for sp, ids, x in zip(mask.spans, self.spans, self.nll)]
        )


class NgramGenerator(SpanGenerator):
    """Left-to-right n-gram infiller; right context is ignored."""

    name = "ngram"

    def __init__(self, lm: NgramLM):
        self.lm = lm

    @property
    def ready(self) -> bool:
        return self.lm.ready

    def fill(self, mask, cfg, rng):
        ids = mask.seq.ids
        context: list[int] = []
        pos = 0
        out = []
        for sp in mask.spans:
            context.extend(ids[pos : sp.start])
            length = min(poisson_sample(rng, cfg.lam), cfg.max_gen_len)
            toks, nll = [], []
            for _ in range(length):
                tid, prob = nucleus_sample(self.lm.distribution(context), cfg.p, rng)
                toks.append(tid)
                nll.append(-math.log(prob))
                context.append(tid)
            out.append(span_output(toks, nll, sp.gt_ids))
            pos = sp.end
        return GeneratorOutput(out)


class RuleNoiseGenerator(SpanGenerator):
    name = "rule"

    def __init__(self, vocab: Vocab, noise: NoiseConfig | None = None):
        self.vocab = vocab
        self.noise = noise or NoiseConfig()

    def fill(self, mask, cfg, rng):
        return GeneratorOutput([rule_noise(sp.gt_ids, self.noise, rng, self.vocab) for sp in mask.spans])


class ExternalGeneratorError(RuntimeError):
    pass


class ExternalGenerator(SpanGenerator):
    """Client for an infilling model running as a child process.

    Speaks line-delimited JSON over the child's stdin/stdout, one request in
    flight at a time. Mask sentinels are sent as ``M_1``, ``M_2``, ...
    """

    name = "external"

    def __init__(self, cmd: str | Sequence[str], vocab: Vocab, timeout: float = 30.0):
        self.vocab = vocab
        self.timeout = timeout
        argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()
                self.proc.wait()

    def request(self, mask: SpanMask) -> dict:
        masked = []
        ids = mask.seq.ids
        pos = 0
        for sp in mask.spans:
            masked.extend(self.vocab.tokens[t] for t in ids[pos : sp.start])
            masked.append(f"M_{sp.index}")
            pos = sp.end
        masked.extend(self.vocab.tokens[t] for t in ids[pos:])
        return {"id": mask.seq.doc_id, "masked": masked, "n_spans": len(mask.spans)}

    def fill(self, mask, cfg, rng):
        req = self.request(mask)
        try:
            self.proc.stdin.write(json.dumps(req, ensure_ascii=False) + "\n")
            self.proc.stdin.flush()
        except OSError as e:
            raise ExternalGeneratorError(f"external generator is not accepting input: {e}") from e
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise ExternalGeneratorError("external generator timeout") from None
        if line is None:
            raise ExternalGeneratorError("external generator exited")
        return parse_response(line, req, mask, self.vocab)


def parse_response(line: str, req: dict, mask: SpanMask, vocab: Vocab) -> GeneratorOutput:
    def bad(why):
        return ExternalGeneratorError(f"malformed response ({why}): {line.strip()!r}")

    try:
        msg = json.loads(line)
    except json.JSONDecodeError:
        raise bad("not JSON") from None
    if not isinstance(msg, dict) or msg.get("id") != req["id"]:
        raise bad("id mismatch")
    spans = msg.get("spans")
    if not isinstance(spans, list) or len(spans) != req["n_spans"]:
        raise bad("wrong span count")
    out = []
    for sp, item in zip(mask.spans, spans):
        if not isinstance(item, dict) or "tokens" not in item or "nll" not in item:
            raise bad("span needs 'tokens' and 'nll'")
        toks, nll = item["tokens"], item["nll"]
        if not isinstance(toks, list) or not all(isinstance(t, str) for t in toks):
            raise bad("'tokens' must be a list of strings")
        if not isinstance(nll, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in nll):
            raise bad("'nll' must be a list of numbers")
        if len(toks) != len(nll):
            raise bad("tokens/nll length mismatch")
        if any(not math.isfinite(x) or x < 0 for x in nll):
            raise bad("nll values must be finite and non-negative")
        ids = [vocab.id_of.get(t, vocab.unk) for t in toks]
        if any(vocab.is_special(t) and t != vocab.unk for t in ids):
            raise bad("special token in span")
        out.append(span_output(ids, nll, sp.gt_ids))
    return GeneratorOutput(out)


def generate_spans(generator: SpanGenerator, mask: SpanMask, cfg: GenConfig, rng, vocab: Vocab) -> GeneratorOutput:
    if not generator.ready:
        raise RuntimeError("generator not ready")
    out = generator.fill(mask, cfg, rng)
    out.validate(mask, vocab)
    return out
