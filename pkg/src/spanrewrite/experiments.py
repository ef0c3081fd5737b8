"""Paired desk-scale comparison: infill then SSR continual training versus infill only.

Both arms share the infilling warm start, the total number of pre-training
steps, the fine-tuning budget and the synthetic GEC task, so the only
difference is what the second pre-training stage optimizes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import TokenSeq, build_vocab, tokenize
from .curriculum import CurriculumSchedule
from .dataset import build_examples
from .generators import GenConfig, NoiseConfig
from .masking import MaskConfig
from .model import ModelConfig
from .synth import synthetic_corpus
from .tasks import evaluate, make_synth_gec
from .training import TrainConfig, as_self_generator, finetune, pretrain

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComparisonConfig:
    n_sentences: int = 50_000
    vocab_size: int = 1000
    infill_steps: int = 1500
    ssr_steps: int = 1500
    ssr_docs: int = 12_000
    finetune_steps: int = 1500
    task_docs: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    # milder than the pre-training noise so that a sentence carries one or two errors
    task_noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(0.04, 0.04, 0.04, 0.02))
    strategy: str = "curriculum"
    corpus_seed: int = 1234


def _windows(sentences, vocab, prefix):
    return [TokenSeq(tokenize(s, vocab).ids, f"{prefix}{i:07d}") for i, s in enumerate(sentences)]


def run_pair(seed: int, cfg: ComparisonConfig) -> dict:
    """One seed of the comparison; returns both arms' test metrics."""
    t0 = time.time()
    sentences = synthetic_corpus(cfg.n_sentences, seed=cfg.corpus_seed)
    vocab = build_vocab(sentences, max_size=cfg.vocab_size)
    task_sents = sentences[: cfg.task_docs]
    pre_sents = sentences[cfg.task_docs :]
    pre = [w for w in _windows(pre_sents, vocab, "p") if len(w) >= 2]
    model_cfg = ModelConfig(vocab_size=len(vocab))
    mask_cfg = MaskConfig(max_spans=vocab.max_sentinels)

    def tcfg(steps, tag):
        return TrainConfig(
            steps=steps,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            warmup_steps=min(100, steps),
            eval_every=max(steps, 1) if tag != "ft" else 100,
            seed=seed,
        )

    infill = build_examples(pre, vocab, "infill", seed, mask_cfg=mask_cfg)
    warm = pretrain(None, infill, "infill", None, tcfg(cfg.infill_steps, "pre"), model_cfg=model_cfg, vocab=vocab)
    log.info("seed %d: infill warm start done (%.0fs)", seed, time.time() - t0)

    gen = as_self_generator(warm.checkpoint, vocab)
    ssr_docs = pre[: cfg.ssr_docs]
    ssr = build_examples(ssr_docs, vocab, "ssr", seed + 1, generator=gen, mask_cfg=mask_cfg, gen_cfg=GenConfig())
    ssr_run = pretrain(
        warm.checkpoint, ssr, "ssr", CurriculumSchedule(cfg.strategy), tcfg(cfg.ssr_steps, "pre"), vocab=vocab
    )
    # the baseline keeps infilling for the same number of steps, on a fresh batch stream
    base_cfg = TrainConfig(**{**asdict(tcfg(cfg.ssr_steps, "pre")), "seed": seed + 7919})
    base_run = pretrain(warm.checkpoint, infill, "infill", None, base_cfg, vocab=vocab)
    log.info("seed %d: continual stage done (%.0fs)", seed, time.time() - t0)

    task_windows = _windows(task_sents, vocab, "t")
    splits = make_synth_gec(task_windows, vocab, cfg.task_noise, seed)
    out = {"seed": seed, "n_ssr_examples": len(ssr), "task_sizes": {k: len(v) for k, v in splits.items()}}
    for arm, run in (("ssr", ssr_run), ("infill", base_run)):
        ft = finetune(run.checkpoint, splits["train"], splits["dev"], tcfg(cfg.finetune_steps, "ft"), vocab)
        report = evaluate(ft.checkpoint, splits["test"], vocab, name=arm)
        out[arm] = report["metrics"]
        out["copy_baseline"] = report["copy_baseline"]
    out["seconds"] = round(time.time() - t0, 1)
    log.info("seed %d: ssr f05 %.4f infill f05 %.4f", seed, out["ssr"]["f05"], out["infill"]["f05"])
    return out


def compare(seeds=(0, 1, 2), cfg: ComparisonConfig | None = None) -> dict:
    cfg = cfg or ComparisonConfig()
    runs = [run_pair(s, cfg) for s in seeds]
    ssr = float(np.mean([r["ssr"]["f05"] for r in runs]))
    base = float(np.mean([r["infill"]["f05"] for r in runs]))
    return {
        "seeds": list(seeds),
        "ssr_f05": ssr,
        "infill_f05": base,
        "margin": ssr - base,
        "runs": runs,
    }
