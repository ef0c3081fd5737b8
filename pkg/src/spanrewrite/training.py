"""Optimization loops: pre-training objectives, fine-tuning, and the self generator."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Vocab
from .curriculum import CurriculumSchedule, bucketize, schedule_order
from .dataset import SSRExample
from .generators import GenConfig, GeneratorOutput, SpanGenerator, nucleus_sample, span_output
from .masking import SpanMask, apply_mask
from .model import (
    Checkpoint,
    ModelConfig,
    decode_batch,
    init_params,
    loss_and_grad,
    save_checkpoint,
)
from .rng import derive_rng

log = logging.getLogger(__name__)

OBJECTIVES = ("infill", "ssr", "distill", "denoise")


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    lr: float = 3e-4
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    eval_every: int = 100
    seed: int = 0
    patience: int = 5
    dev_limit: int = 200

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("steps, batch_size, eval_every and patience must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} must lie in [0, steps={self.steps}]")
        if self.lr <= 0 or self.eps <= 0 or self.grad_clip <= 0:
            raise ValueError("lr, eps and grad_clip must be > 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``step``: linear warmup, then constant."""
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # sorted keys for a fixed reduction order
    return math.sqrt(math.fsum(float(np.vdot(grads[k], grads[k])) for k in sorted(grads)))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale ``grads`` so their global norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig, state: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        state = state or {}
        self.m = {k: state.get(f"m.{k}", np.zeros_like(v)).copy() for k, v in params.items()}
        self.v = {k: state.get(f"v.{k}", np.zeros_like(v)).copy() for k, v in params.items()}
        self.t = int(state["t"][0]) if "t" in state else 0

    def step(self, params, grads, lr: float) -> dict[str, np.ndarray]:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            out[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)
        return out

    def state(self) -> dict[str, np.ndarray]:
        st = {f"m.{k}": v for k, v in self.m.items()}
        st.update({f"v.{k}": v for k, v in self.v.items()})
        st["t"] = np.array([float(self.t)])
        return st


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def _pairs(examples: Sequence[SSRExample], idx) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    return [(examples[i].source_ids, examples[i].target_ids) for i in idx]


def _write_jsonl(path, records) -> None:
    if path is None:
        return
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _save_periodic(ckpt_dir, tag: str, ckpt: Checkpoint) -> None:
    if ckpt_dir is None:
        return
    Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, Path(ckpt_dir) / f"{tag}-{ckpt.step:06d}.ckpt")


def _train_loop(params, cfg_model, cfg, batches, opt, rng, on_eval=None, phase_of=None, histo_of=None):
    """Shared update loop. ``on_eval(step, params, window)`` may return False to stop early."""
    history: list[dict] = []
    window: list[float] = []
    records: list[dict] = []
    for step, idx_pairs in enumerate(batches, start=1):
        idx, pairs = idx_pairs
        loss, grads = loss_and_grad(params, cfg_model, pairs, rng=rng if cfg_model.dropout > 0 else None)
        grads, norm = clip_grads(grads, cfg.grad_clip)
        lr = lr_at(step, cfg)
        params = opt.step(params, grads, lr)
        window.append(loss)
        history.append({"step": step, "loss": loss, "lr": lr, "grad_norm": norm, "clipped_norm": global_norm(grads)})
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rec = {"step": step, "train_loss": float(np.mean(window)), "lr": lr}
            if phase_of is not None:
                rec["phase"] = phase_of(step - 1)
            if histo_of is not None:
                rec["buckets"] = histo_of(idx)
            window = []
            keep_going = True
            if on_eval is not None:
                keep_going = on_eval(step, params, rec) is not False
            records.append(rec)
            if not keep_going:
                break
    return params, history, records


def pretrain(
    ckpt: Checkpoint | None,
    dataset: Sequence[SSRExample],
    objective: str,
    schedule: CurriculumSchedule | None,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    vocab: Vocab | None = None,
    from_scratch: bool = False,
    log_path=None,
    ckpt_dir=None,
) -> TrainResult:
    """Train ``objective`` on ``dataset``, continuing from ``ckpt`` or a fresh init.

    SSR runs continue from an infilling checkpoint unless ``from_scratch``.
    Batches follow ``schedule`` (uniform when None).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if not dataset:
        raise ValueError("empty dataset")
    modes = {ex.mode for ex in dataset}
    if modes != {objective}:
        raise ValueError(f"objective {objective!r} does not match dataset mode(s) {sorted(modes)}")
    if ckpt is None:
        if objective == "ssr" and not from_scratch:
            raise ValueError("SSR pre-training continues from an infilling checkpoint (or pass from_scratch)")
        if model_cfg is None:
            raise ValueError("a fresh model needs a ModelConfig")
        params = init_params(model_cfg, derive_rng(cfg.seed, "init"))
        meta = {"lineage": []}
        step0 = 0
    else:
        if objective == "ssr" and not from_scratch and "infill" not in ckpt.meta.get("lineage", []):
            raise ValueError("SSR pre-training needs an infilling checkpoint to continue from")
        model_cfg = ckpt.config
        params = {k: v.copy() for k, v in ckpt.params.items()}
        meta = json.loads(json.dumps(ckpt.meta))
        step0 = ckpt.step
    if vocab is not None:
        if len(vocab) != model_cfg.vocab_size:
            raise ValueError("vocabulary size does not match the model")
        meta["vocab"] = vocab.fingerprint()

    schedule = schedule or CurriculumSchedule("none")
    data = list(dataset)
    if schedule.strategy != "none" and any(ex.bucket is None for ex in data):
        data = bucketize(data, schedule.k, schedule.strategy)
    rng = derive_rng(cfg.seed, "pretrain", objective)
    order = schedule_order(data, schedule, cfg.steps, cfg.batch_size, rng)
    batches = ((idx, _pairs(data, idx)) for idx in order)

    def histo(idx):
        if data[0].bucket is None:
            return {}
        h = np.bincount([data[i].bucket for i in idx], minlength=schedule.k + 1)[1:]
        return {str(b + 1): int(c) for b, c in enumerate(h)}

    opt = Adam(params, cfg)
    lineage = meta.setdefault("lineage", [])
    if cfg.steps > 0:
        lineage.append(objective)
    meta["objective"] = objective if cfg.steps > 0 else meta.get("objective", objective)
    meta["strategy"] = schedule.strategy

    def on_eval(step, p, rec):
        log.info("pretrain %s step %d loss %.4f", objective, step, rec["train_loss"])
        _save_periodic(ckpt_dir, objective, Checkpoint(model_cfg, p, step0 + step, dict(meta), opt.state()))

    params, history, records = _train_loop(
        params,
        model_cfg,
        cfg,
        batches,
        opt,
        rng,
        on_eval=on_eval,
        phase_of=lambda s: schedule.phase_of(s, cfg.steps) if schedule.strategy != "none" else 1,
        histo_of=histo,
    )
    _write_jsonl(log_path, records)
    out = Checkpoint(
        model_cfg,
        params,
        step0 + len(history),
        meta,
        opt.state() if history else {},
        {"seed": cfg.seed, "stream": ["pretrain", objective]},
    )
    return TrainResult(out, history, records)


def _check_vocab(ckpt: Checkpoint, vocab: Vocab) -> None:
    if ckpt.config.vocab_size != len(vocab):
        raise ValueError(f"checkpoint vocabulary size {ckpt.config.vocab_size} != task vocabulary size {len(vocab)}")
    fp = ckpt.meta.get("vocab")
    if fp is not None and fp != vocab.fingerprint():
        raise ValueError("checkpoint vocabulary does not match the task vocabulary")


def exact_match(params, cfg: ModelConfig, examples: Sequence[SSRExample], vocab: Vocab) -> float:
    from .tasks import decode_payloads, target_payload

    if not examples:
        return 0.0
    hyps = decode_payloads(params, cfg, examples, vocab)
    return sum(h == target_payload(ex, vocab) for h, ex in zip(hyps, examples)) / len(examples)


def finetune(
    ckpt: Checkpoint,
    train: Sequence[SSRExample],
    dev: Sequence[SSRExample],
    cfg: TrainConfig,
    vocab: Vocab,
    log_path=None,
    ckpt_dir=None,
) -> TrainResult:
    """Fine-tune on rewriting pairs; early-stop on dev exact match and return the best checkpoint."""
    _check_vocab(ckpt, vocab)
    if not train:
        raise ValueError("empty training set")
    if any(ex.mode != "finetune" for ex in train):
        raise ValueError("fine-tuning needs finetune-mode examples")
    model_cfg = ckpt.config
    params = {k: v.copy() for k, v in ckpt.params.items()}
    meta = json.loads(json.dumps(ckpt.meta))
    meta["vocab"] = vocab.fingerprint()
    meta.setdefault("lineage", []).append("finetune")
    meta["objective"] = "finetune"
    dev = list(dev)[: cfg.dev_limit]
    rng = derive_rng(cfg.seed, "finetune")
    n = len(train)
    batches = ((idx, _pairs(train, idx)) for idx in (rng.integers(0, n, size=cfg.batch_size).tolist() for _ in range(cfg.steps)))
    opt = Adam(params, cfg)
    best = {"score": -1.0, "params": params, "step": 0, "bad": 0}

    def on_eval(step, p, rec):
        score = exact_match(p, model_cfg, dev, vocab) if dev else -rec["train_loss"]
        rec["dev_exact_match"] = score if dev else None
        log.info("finetune step %d loss %.4f dev em %s", step, rec["train_loss"], rec["dev_exact_match"])
        if score > best["score"]:
            best.update(score=score, params=p, step=step, bad=0)
        else:
            best["bad"] += 1
        _save_periodic(ckpt_dir, "finetune", Checkpoint(model_cfg, p, ckpt.step + step, dict(meta)))
        return best["bad"] < cfg.patience

    params, history, records = _train_loop(params, model_cfg, cfg, batches, opt, rng, on_eval=on_eval)
    _write_jsonl(log_path, records)
    if not history:
        best["params"] = params
    meta["best_step"] = best["step"]
    meta["best_dev_exact_match"] = best["score"] if dev and history else None
    out = Checkpoint(model_cfg, best["params"], ckpt.step + best["step"], meta, {}, {"seed": cfg.seed, "stream": ["finetune"]})
    return TrainResult(out, history, records)


# ---------------------------------------------------------------------------
# self generator


class SelfGenerator(SpanGenerator):
    """Fills masked spans with an infilling checkpoint via constrained nucleus decoding.

    The decoder must open with ``<M_1>``; afterwards it may emit content
    tokens or the next sentinel (``<eos>`` after the last span), and is forced
    to the next sentinel once a span reaches ``max_gen_len``. Sampling is
    restricted to the allowed tokens, while each emitted token's NLL is read
    from the full softmax.
    """

    name = "self"

    def __init__(self, ckpt: Checkpoint, vocab: Vocab, batch_size: int = 64):
        _check_vocab(ckpt, vocab)
        self.ckpt = ckpt
        self.vocab = vocab
        self.batch_size = batch_size
        self._content = np.zeros(len(vocab), dtype=bool)
        self._content[vocab.content_ids()] = True

    def fill(self, mask, cfg, rng):
        return self.fill_many([mask], cfg, [rng])[0]

    def fill_many(self, masks: Sequence[SpanMask], cfg: GenConfig, rngs) -> list[GeneratorOutput]:
        out: list[GeneratorOutput] = []
        for lo in range(0, len(masks), self.batch_size):
            out.extend(self._fill_batch(masks[lo : lo + self.batch_size], cfg, rngs[lo : lo + self.batch_size]))
        return out

    def _fill_batch(self, masks, cfg: GenConfig, rngs) -> list[GeneratorOutput]:
        v = self.vocab
        eos = self.ckpt.config.eos_id
        n_spans = [len(m.spans) for m in masks]
        sources = [list(apply_mask(m, v)[0].ids) for m in masks]
        nlls: list[list[float]] = [[] for _ in masks]
        state = [{"span": 0, "len": 0} for _ in masks]

        def choose(row, probs, prefix):
            st = state[row]
            n = n_spans[row]
            if st["span"] == 0:
                st["span"] = 1
                return v.mask_id(1) if n else eos
            nxt = v.mask_id(st["span"] + 1) if st["span"] < n else eos
            if st["len"] >= cfg.max_gen_len:
                tok = nxt
            else:
                allowed = self._content.copy()
                allowed[nxt] = True
                q = np.where(allowed, probs, 0.0)
                total = q.sum()
                if total <= 0:
                    tok = nxt
                else:
                    tok = int(nucleus_sample(q / total, cfg.p, rngs[row])[0])
            if tok == nxt:
                st["span"] += 1
                st["len"] = 0
            else:
                st["len"] += 1
                nlls[row].append(-math.log(max(float(probs[tok]), 1e-300)))
            return tok

        max_len = max(n * (cfg.max_gen_len + 1) for n in n_spans) + 1
        decoded = decode_batch(self.ckpt.params, self.ckpt.config, sources, choose, max_len=max_len)
        results = []
        for m, ids, nll in zip(masks, decoded, nlls):
            spans: list[list[int]] = []
            for t in ids:
                kind = v.sentinel_kind(t)
                if kind is not None and kind[0] == "mask":
                    spans.append([])
                else:
                    spans[-1].append(t)
            pos = 0
            outs = []
            for sp, toks in zip(m.spans, spans):
                outs.append(span_output(toks, nll[pos : pos + len(toks)], sp.gt_ids))
                pos += len(toks)
            results.append(GeneratorOutput(outs))
        return results


def as_self_generator(ckpt: Checkpoint, vocab: Vocab, batch_size: int = 64) -> SelfGenerator:
    objective = ckpt.meta.get("objective")
    if objective != "infill":
        msg = f"checkpoint objective is {objective!r}; the self generator needs an infilling checkpoint (format mismatch)"
        warnings.warn(msg, stacklevel=2)
        raise ValueError(msg)
    return SelfGenerator(ckpt, vocab, batch_size)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
