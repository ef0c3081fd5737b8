"""Training-record construction for the rewriting, infilling, distillation,
denoising and fine-tuning formats, plus JSONL persistence."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .corpus import TokenSeq, Vocab, detokenize
from .generators import (
    GenConfig,
    GeneratorOutput,
    NoiseConfig,
    SpanGenerator,
    noise_tokens,
)
from .masking import MaskConfig, SpanMask, apply_mask, sample_spans
from .rng import derive_rng

MODES = ("ssr", "infill", "distill", "denoise", "finetune")


@dataclass(frozen=True)
class SpanRecord:
    index: int
    start: int
    gt: tuple[int, ...]
    imp: tuple[int, ...] = ()
    nll: tuple[float, ...] = ()


@dataclass
class SSRExample:
    id: str
    mode: str
    source_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    spans: list[SpanRecord] = field(default_factory=list)
    difficulty: float = 0.0
    bucket: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


def _records(mask: SpanMask, gen: GeneratorOutput | None) -> list[SpanRecord]:
    if gen is None:
        return [SpanRecord(sp.index, sp.start, sp.gt_ids) for sp in mask.spans]
    if len(gen.spans) != len(mask.spans):
        raise ValueError(
            f"span-count mismatch: mask has {len(mask.spans)}, generator output has {len(gen.spans)}"
        )
    return [
        SpanRecord(sp.index, sp.start, sp.gt_ids, out.imperfect_ids, out.nll)
        for sp, out in zip(mask.spans, gen.spans)
    ]


def build_ssr_example(mask: SpanMask, gen: GeneratorOutput, vocab: Vocab, ex_id: str | None = None) -> SSRExample:
    """Source wraps each imperfect span in ``<s_i> ... </s_i>``; target is ``<s_1> gt_1 <s_2> gt_2 ...``."""
    recs = _records(mask, gen)
    if len(recs) > vocab.max_sentinels:
        raise ValueError("too many spans")
    ids = mask.seq.ids
    source: list[int] = []
    target: list[int] = []
    pos = 0
    for r in recs:
        source.extend(ids[pos : r.start])
        source.append(vocab.open_id(r.index))
        source.extend(r.imp)
        source.append(vocab.close_id(r.index))
        target.append(vocab.open_id(r.index))
        target.extend(r.gt)
        pos = r.start + len(r.gt)
    source.extend(ids[pos:])
    difficulty = math.fsum(x for r in recs for x in r.nll)
    return SSRExample(ex_id or mask.seq.doc_id, "ssr", tuple(source), tuple(target), recs, difficulty)


def build_infill_example(mask: SpanMask, vocab: Vocab, ex_id: str | None = None) -> SSRExample:
    source, target = apply_mask(mask, vocab)
    return SSRExample(ex_id or mask.seq.doc_id, "infill", source.ids, target.ids, _records(mask, None), 0.0)


def build_distill_example(mask: SpanMask, gen: GeneratorOutput, vocab: Vocab, ex_id: str | None = None) -> SSRExample:
    """Infilling source with the generator's spans as target (sequence-level distillation)."""
    recs = _records(mask, gen)
    source, _ = apply_mask(mask, vocab)
    target: list[int] = []
    for r in recs:
        target.append(vocab.mask_id(r.index))
        target.extend(r.imp)
    difficulty = math.fsum(x for r in recs for x in r.nll)
    return SSRExample(ex_id or mask.seq.doc_id, "distill", source.ids, tuple(target), recs, difficulty)


def build_denoise_example(
    seq: TokenSeq, cfg: NoiseConfig, rng: np.random.Generator, vocab: Vocab, ex_id: str | None = None
) -> SSRExample:
    if len(seq) < 2:
        raise ValueError("sequence too short")
    noised, _ = noise_tokens(seq.ids, cfg, rng, vocab)
    return SSRExample(ex_id or seq.doc_id, "denoise", tuple(noised), tuple(seq.ids))


def build_finetune_example(
    src: Sequence[int],
    tgt: Sequence[int],
    vocab: Vocab,
    ex_id: str = "",
    region: tuple[int, int] | None = None,
) -> SSRExample:
    """Wrap ``src`` (or only ``src[region]``) in ``<s_1> ... </s_1>``; target is ``<s_1> tgt``."""
    src, tgt = tuple(src), tuple(tgt)
    if not src or not tgt:
        raise ValueError("fine-tuning source and target must be nonempty")
    lo, hi = region if region is not None else (0, len(src))
    if not 0 <= lo <= hi <= len(src):
        raise ValueError("rewrite region outside the source")
    s1, c1 = vocab.open_id(1), vocab.close_id(1)
    source = src[:lo] + (s1,) + src[lo:hi] + (c1,) + src[hi:]
    rec = SpanRecord(1, lo, tgt, src[lo:hi], ())
    return SSRExample(ex_id, "finetune", source, (s1,) + tgt, [rec], 0.0)


# ---------------------------------------------------------------------------
# structural helpers


def split_target(target: Sequence[int], vocab: Vocab, family: str) -> dict[int, list[int]]:
    """Map sentinel index -> following tokens for a ``<s_i>``/``<M_i>`` separated target."""
    out: dict[int, list[int]] = {}
    cur = None
    for t in target:
        kind = vocab.sentinel_kind(t)
        if kind is not None and kind[0] == family:
            cur = kind[1]
            out[cur] = []
        elif cur is not None:
            out[cur].append(t)
        else:
            raise ValueError("target does not start with a sentinel")
    return out


def reconstruct(ex: SSRExample, vocab: Vocab) -> list[int]:
    """Recover the original window by putting target spans back into the source."""
    if ex.mode in ("ssr", "finetune"):
        fills = split_target(ex.target_ids, vocab, "open")
        out: list[int] = []
        inside = None
        for t in ex.source_ids:
            kind = vocab.sentinel_kind(t)
            if kind is not None and kind[0] == "open":
                if inside is not None:
                    raise ValueError("nested span delimiters")
                inside = kind[1]
                out.extend(fills[inside])
            elif kind is not None and kind[0] == "close":
                if inside != kind[1]:
                    raise ValueError("unbalanced span delimiters")
                inside = None
            elif inside is None:
                out.append(t)
        if inside is not None:
            raise ValueError("unterminated span")
        return out
    if ex.mode in ("infill", "distill"):
        fills = split_target(ex.target_ids, vocab, "mask") if ex.mode == "infill" else {r.index: list(r.gt) for r in ex.spans}
        out = []
        for t in ex.source_ids:
            kind = vocab.sentinel_kind(t)
            if kind is not None and kind[0] == "mask":
                out.extend(fills[kind[1]])
            else:
                out.append(t)
        return out
    if ex.mode == "denoise":
        return list(ex.target_ids)
    raise ValueError(f"cannot reconstruct mode {ex.mode!r}")


def check_example(ex: SSRExample, vocab: Vocab) -> None:
    """Raise ValueError if the record breaks a structural invariant of its mode."""
    families = {vocab.sentinel_kind(t)[0] for t in ex.source_ids + ex.target_ids if vocab.is_sentinel(t)}
    if ex.mode in ("ssr", "finetune"):
        if "mask" in families:
            raise ValueError("mask sentinel in a rewriting example")
        opens = [vocab.sentinel_kind(t)[1] for t in ex.source_ids if vocab.sentinel_kind(t) and vocab.sentinel_kind(t)[0] == "open"]
        if opens != list(range(1, len(opens) + 1)):
            raise ValueError("span delimiters out of order")
        tgt_open = [vocab.sentinel_kind(t)[1] for t in ex.target_ids if vocab.is_sentinel(t)]
        if tgt_open != opens:
            raise ValueError("target sentinels do not match source spans")
        reconstruct(ex, vocab)
    elif ex.mode in ("infill", "distill"):
        if families - {"mask"}:
            raise ValueError("rewrite delimiter in an infilling example")
    if ex.mode == "ssr":
        total = math.fsum(x for r in ex.spans for x in r.nll)
        if abs(total - ex.difficulty) > 1e-9:
            raise ValueError("difficulty is not the summed span NLL")


# ---------------------------------------------------------------------------
# persistence


def example_to_json(ex: SSRExample, vocab: Vocab | None = None) -> dict:
    return {
        "id": ex.id,
        "mode": ex.mode,
        "source": list(ex.source_ids),
        "target": list(ex.target_ids),
        "source_text": detokenize(ex.source_ids, vocab) if vocab is not None else "",
        "target_text": detokenize(ex.target_ids, vocab) if vocab is not None else "",
        "spans": [
            {"index": r.index, "start": r.start, "gt": list(r.gt), "imp": list(r.imp), "nll": list(r.nll)}
            for r in ex.spans
        ],
        "difficulty": ex.difficulty,
        "bucket": ex.bucket,
    }


def _int_list(v, key):
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise ValueError(f"field {key!r} must be a list of ints")
    return tuple(v)


def example_from_json(obj: dict) -> SSRExample:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    try:
        spans = [
            SpanRecord(
                int(s["index"]),
                int(s.get("start", -1)),
                _int_list(s["gt"], "gt"),
                _int_list(s["imp"], "imp"),
                tuple(float(x) for x in s["nll"]),
            )
            for s in obj["spans"]
        ]
        bucket = obj["bucket"]
        return SSRExample(
            str(obj["id"]),
            obj["mode"],
            _int_list(obj["source"], "source"),
            _int_list(obj["target"], "target"),
            spans,
            float(obj["difficulty"]),
            None if bucket is None else int(bucket),
        )
    except (KeyError, TypeError) as e:
        raise ValueError(f"missing or mistyped field: {e}") from None


def write_dataset(examples: Iterable[SSRExample], path: str | os.PathLike, vocab: Vocab | None = None) -> int:
    n = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex, vocab), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
            n += 1
    os.replace(tmp, path)
    return n


def read_dataset(path: str | os.PathLike) -> Iterator[SSRExample]:
    """Stream records from a JSONL file; memory use does not grow with file size."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise ValueError(f"{path}:{lineno}: truncated record")
            if not line.strip():
                continue
            try:
                yield example_from_json(json.loads(line))
            except (json.JSONDecodeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed record: {e}") from None


def load_dataset(path) -> list[SSRExample]:
    return list(read_dataset(path))


# ---------------------------------------------------------------------------
# corpus-level construction


def build_examples(
    windows: Sequence[TokenSeq],
    vocab: Vocab,
    mode: str,
    seed: int,
    generator: SpanGenerator | None = None,
    mask_cfg: MaskConfig | None = None,
    gen_cfg: GenConfig | None = None,
    noise_cfg: NoiseConfig | None = None,
    keep_exact_copies: bool = True,
    chunk: int = 256,
) -> list[SSRExample]:
    """Build one record per window; output is sorted by id and depends only on the inputs and ``seed``.

    Masking and generation draw from per-window streams keyed on the window id.
    """
    mask_cfg = mask_cfg or MaskConfig(max_spans=vocab.max_sentinels)
    gen_cfg = gen_cfg or GenConfig()
    if mask_cfg.max_spans > vocab.max_sentinels:
        mask_cfg = replace(mask_cfg, max_spans=vocab.max_sentinels)
    windows = sorted(windows, key=lambda w: w.doc_id)
    if mode == "denoise":
        noise_cfg = noise_cfg or NoiseConfig()
        return [build_denoise_example(w, noise_cfg, derive_rng(seed, "noise", w.doc_id), vocab) for w in windows]
    if mode == "finetune":
        raise ValueError("fine-tuning records come from a task, not from raw windows")
    masks = [sample_spans(w, derive_rng(seed, "mask", w.doc_id), mask_cfg) for w in windows]
    if mode == "infill":
        return [build_infill_example(m, vocab) for m in masks]
    if generator is None:
        raise ValueError(f"mode {mode!r} needs a span generator")
    if not generator.ready:
        raise RuntimeError("generator not ready")
    out: list[SSRExample] = []
    for lo in range(0, len(masks), chunk):
        part = masks[lo : lo + chunk]
        rngs = [derive_rng(seed, "gen", m.seq.doc_id) for m in part]
        for m, g in zip(part, generator.fill_many(part, gen_cfg, rngs)):
            g.validate(m, vocab)
            if not keep_exact_copies and g.spans and all(s.is_exact_copy for s in g.spans):
                continue
            if mode == "ssr":
                out.append(build_ssr_example(m, g, vocab))
            elif mode == "distill":
                out.append(build_distill_example(m, g, vocab))
            else:
                raise ValueError(f"unknown mode {mode!r}")
    return out
