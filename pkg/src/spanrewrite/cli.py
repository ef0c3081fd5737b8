"""Command-line entry points for the span-rewriting pipeline.

Every stage reads and writes declared artifacts under the output directory,
is skipped when its outputs already exist (unless ``--force``), and fails
with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .corpus import Vocab, build_vocab, iter_documents, load_windows
from .curriculum import STRATEGIES, CurriculumSchedule, bucket_stats, bucketize, normalize_strategy
from .dataset import SSRExample, load_dataset, write_dataset
from .generators import (
    ExternalGenerator,
    GenConfig,
    IdentityGenerator,
    NgramGenerator,
    NgramLM,
    NoiseConfig,
    RuleNoiseGenerator,
    train_ngram,
)
from .masking import MaskConfig
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .tasks import evaluate, make_synth_gec
from .training import TrainConfig, as_self_generator, finetune, pretrain

log = logging.getLogger("spanrewrite")

COMMANDS = (
    "build-vocab",
    "train-generator",
    "build-dataset",
    "score-curriculum",
    "pretrain",
    "build-task",
    "finetune",
    "evaluate",
    "run-all",
    "inspect",
    "ablate-curriculum",
    "make-demo-corpus",
)


class PipelineError(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class OutputLock:
    """Exclusive lock file guarding an output directory."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid = self.path.read_text().strip()
            if pid.isdigit() and not _alive(int(pid)):
                self.path.unlink()
                return self.__enter__()
            raise PipelineError(f"output directory is locked by process {pid}: {self.path}") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out: Path, force: bool = False):
        self.cfg = cfg
        self.out = out
        self.force = force
        self._vocab: Vocab | None = None

    # -- artifact paths ----------------------------------------------------
    @property
    def vocab_path(self) -> Path:
        return self.out / "vocab.txt"

    @property
    def generator_path(self) -> Path:
        return self.out / "generator.json"

    def data_path(self, mode: str) -> Path:
        return self.out / "data" / f"{mode}.jsonl"

    @property
    def bucketed_path(self) -> Path:
        return self.out / "data" / "ssr.bucketed.jsonl"

    def ckpt_path(self, name: str) -> Path:
        return self.out / "ckpt" / f"{name}.ckpt"

    def metrics_path(self, name: str) -> Path:
        return self.out / "logs" / f"{name}.metrics.jsonl"

    def task_path(self, split: str) -> Path:
        return self.out / "task" / f"{split}.jsonl"

    @property
    def report_path(self) -> Path:
        return self.out / "reports" / "eval.json"

    # -- helpers -----------------------------------------------------------
    def need(self, path: Path, command: str) -> Path:
        if not path.exists():
            raise PipelineError(f"missing input: {path} (run {command} first)")
        return path

    def done(self, *paths: Path) -> bool:
        if not self.force and all(p.exists() for p in paths):
            log.info("skip: %s already exist(s)", ", ".join(str(p) for p in paths))
            return True
        return False

    @property
    def vocab(self) -> Vocab:
        if self._vocab is None:
            self._vocab = Vocab.load(self.need(self.vocab_path, "build-vocab"))
        return self._vocab

    def corpus_paths(self) -> list[Path]:
        return [self.cfg.resolve(p) for p in self.cfg.corpus.paths]

    def pretrain_windows(self):
        """Corpus windows, minus the documents held out for the downstream task."""
        c = self.cfg.corpus
        wins = load_windows(self.corpus_paths(), self.vocab, c.max_len, c.lowercase, c.min_len)
        if not self.cfg.task.paths:
            held = self.cfg.task.n_docs
            wins = [w for w in wins if int(w.doc_id[1:8]) >= held]
        if not wins:
            raise PipelineError("no pre-training windows left after holding out the task documents")
        return wins

    def mask_cfg(self) -> MaskConfig:
        m = self.cfg.masking
        return MaskConfig(
            lam=m.lam,
            budget=m.budget,
            max_span_len=m.max_span_len,
            max_spans=min(m.max_spans, self.vocab.max_sentinels),
            hard_cap=m.hard_cap,
            max_insert_frac=m.max_insert_frac,
        )

    def gen_cfg(self) -> GenConfig:
        g = self.cfg.generator
        return GenConfig(p=g.p, max_gen_len=g.max_gen_len, lam=self.cfg.masking.lam)

    def noise_cfg(self, section) -> NoiseConfig:
        return NoiseConfig(section.p_delete, section.p_replace, section.p_shuffle, section.p_duplicate)

    def model_cfg(self) -> ModelConfig:
        m = self.cfg.model
        return ModelConfig(
            vocab_size=len(self.vocab),
            n_layers=m.n_layers,
            n_heads=m.n_heads,
            d_model=m.d_model,
            d_ff=m.d_ff,
            max_rel_distance=m.max_rel_distance,
            dropout=m.dropout,
            max_decode_len=m.max_decode_len,
        )

    def train_cfg(self, stage: str) -> TrainConfig:
        s = getattr(self.cfg.train, stage)
        return TrainConfig(
            steps=s.steps,
            batch_size=s.batch_size,
            lr=s.lr,
            warmup_steps=s.warmup_steps,
            grad_clip=s.grad_clip,
            eval_every=s.eval_every,
            seed=self.cfg.seed,
            patience=s.patience,
            dev_limit=s.dev_limit,
        )

    def make_generator(self):
        kind = self.cfg.generator.kind
        if kind == "identity":
            return IdentityGenerator()
        if kind == "rule":
            return RuleNoiseGenerator(self.vocab, self.noise_cfg(self.cfg.generator.noise))
        if kind == "ngram":
            obj = json.loads(self.need(self.generator_path, "train-generator").read_text())
            return NgramGenerator(NgramLM.from_json(obj, self.vocab))
        if kind == "self":
            ckpt = load_checkpoint(self.need(self.ckpt_path("infill"), "pretrain --objective infill"))
            return as_self_generator(ckpt, self.vocab)
        if kind.startswith("external:"):
            return ExternalGenerator(kind[len("external:") :], self.vocab, self.cfg.generator.timeout)
        raise PipelineError(f"unknown generator {kind!r}")

    # -- stages ------------------------------------------------------------
    def build_vocab(self):
        if self.done(self.vocab_path):
            return
        c, v = self.cfg.corpus, self.cfg.vocab
        vocab = build_vocab(iter_documents(self.corpus_paths()), v.max_size, v.min_freq, c.lowercase, v.max_sentinels)
        self.out.mkdir(parents=True, exist_ok=True)
        vocab.save(self.vocab_path)
        self._vocab = vocab
        log.info("vocab: %d entries", len(vocab))

    def train_generator(self):
        if self.done(self.generator_path):
            return
        g = self.cfg.generator
        if g.kind == "ngram":
            lm = train_ngram(self.pretrain_windows(), self.vocab, g.order, g.alpha)
            _write_json(self.generator_path, lm.to_json())
        else:
            _write_json(self.generator_path, {"kind": g.kind})
        log.info("generator: %s", g.kind)

    def build_dataset(self, mode: str):
        path = self.data_path(mode)
        if self.done(path):
            return
        generator = self.make_generator() if mode in ("ssr", "distill") else None
        try:
            examples = build_examples_for(self, mode, generator)
        finally:
            if generator is not None:
                generator.close()
        n = write_dataset(examples, path, self.vocab)
        log.info("dataset %s: %d records", mode, n)

    def score_curriculum(self):
        report = self.out / "reports" / "curriculum.json"
        if self.done(self.bucketed_path, report):
            return
        data = load_dataset(self.need(self.data_path("ssr"), "build-dataset --mode ssr"))
        cur = self.cfg.curriculum
        strategy = cur.strategy if cur.strategy != "none" else "curriculum"
        bucketed = bucketize(data, cur.k, strategy)
        write_dataset(bucketed, self.bucketed_path, self.vocab)
        _write_json(report, bucket_stats(bucketed, strategy))

    def pretrain(self, objective: str, strategy: str | None = None, tag: str | None = None, out_dir: Path | None = None):
        tag = tag or objective
        base = out_dir or self.out
        ckpt_out = base / "ckpt" / f"{tag}.ckpt"
        metrics = base / "logs" / f"{tag}.metrics.jsonl"
        if self.done(ckpt_out):
            return
        schedule = None
        init = None
        if objective == "ssr":
            data = load_dataset(self.need(self.bucketed_path, "score-curriculum"))
            cur = self.cfg.curriculum
            strategy = normalize_strategy(strategy or cur.strategy)
            schedule = CurriculumSchedule(strategy, cur.k, cur.mix_current)
            # re-rank under this strategy's scoring rule
            data = bucketize(data, cur.k, "curriculum" if strategy in ("none", "anti") else strategy)
            if not self.cfg.train.from_scratch:
                init = load_checkpoint(self.need(self.ckpt_path("infill"), "pretrain --objective infill"))
        else:
            data = load_dataset(self.need(self.data_path(objective), f"build-dataset --mode {objective}"))
        metrics.parent.mkdir(parents=True, exist_ok=True)
        res = pretrain(
            init,
            data,
            objective,
            schedule,
            self.train_cfg(objective),
            model_cfg=None if init else self.model_cfg(),
            vocab=self.vocab,
            from_scratch=self.cfg.train.from_scratch,
            log_path=metrics,
            ckpt_dir=base / "ckpt" / "steps" / tag,
        )
        ckpt_out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(res.checkpoint, ckpt_out)

    def build_task(self):
        paths = [self.task_path(s) for s in ("train", "dev", "test")]
        if self.done(*paths):
            return
        t, c = self.cfg.task, self.cfg.corpus
        src = [self.cfg.resolve(p) for p in t.paths] or self.corpus_paths()
        docs = [w for w in load_windows(src, self.vocab, c.max_len, c.lowercase, c.min_len) if int(w.doc_id[1:8]) < t.n_docs]
        splits = make_synth_gec(docs, self.vocab, self.noise_cfg(t.noise), self.cfg.seed, tuple(t.split))
        for name, path in zip(("train", "dev", "test"), paths):
            write_dataset(splits[name], path, self.vocab)
        log.info("task: %s", {k: len(v) for k, v in splits.items()})

    def finetune(self, init: str = "ssr", tag: str = "finetune", base: Path | None = None):
        base = base or self.out
        ckpt_out = base / "ckpt" / f"{tag}.ckpt"
        if self.done(ckpt_out):
            return
        src = self.need(base / "ckpt" / f"{init}.ckpt", f"pretrain --objective {init}")
        train = load_dataset(self.need(self.task_path("train"), "build-task"))
        dev = load_dataset(self.need(self.task_path("dev"), "build-task"))
        metrics = base / "logs" / f"{tag}.metrics.jsonl"
        metrics.parent.mkdir(parents=True, exist_ok=True)
        res = finetune(load_checkpoint(src), train, dev, self.train_cfg("finetune"), self.vocab, log_path=metrics)
        save_checkpoint(res.checkpoint, ckpt_out)

    def evaluate(self, tag: str = "finetune", base: Path | None = None) -> dict:
        base = base or self.out
        report_path = base / "reports" / ("eval.json" if tag == "finetune" else f"eval.{tag}.json")
        if self.done(report_path):
            return json.loads(report_path.read_text())
        ckpt_path = self.need(base / "ckpt" / f"{tag}.ckpt", "finetune")
        test = load_dataset(self.need(self.task_path("test"), "build-task"))
        report = evaluate(load_checkpoint(ckpt_path), test, self.vocab, name=str(ckpt_path.relative_to(self.out)))
        _write_json(report_path, report)
        return report

    def run_all(self) -> dict:
        self.build_vocab()
        self.build_dataset("infill")
        self.pretrain("infill")
        self.train_generator()
        self.build_dataset("ssr")
        self.score_curriculum()
        self.pretrain("ssr")
        self.build_task()
        self.finetune("ssr")
        return self.evaluate()

    def ablate(self, strategies=STRATEGIES) -> dict:
        """Continual SSR training under each curriculum strategy, from shared data and seed."""
        self.need(self.ckpt_path("infill"), "pretrain --objective infill")
        self.need(self.bucketed_path, "score-curriculum")
        self.need(self.task_path("test"), "build-task")
        rows = []
        for s in strategies:
            s = normalize_strategy(s)
            base = self.out / "ablation" / s
            self.pretrain("ssr", strategy=s, out_dir=base)
            self.finetune("ssr", base=base)
            report = self.evaluate(base=base)
            last = _last_record(base / "logs" / "ssr.metrics.jsonl")
            rows.append({"strategy": s, "ssr_train_loss": last.get("train_loss"), **report["metrics"]})
        table = {"seed": self.cfg.seed, "rows": rows}
        _write_json(self.out / "reports" / "ablation.json", table)
        return table


def _last_record(path: Path) -> dict:
    if not path.exists():
        return {}
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    return json.loads(lines[-1]) if lines else {}


def build_examples_for(pipe: Pipeline, mode: str, generator) -> list[SSRExample]:
    from .dataset import build_examples

    return build_examples(
        pipe.pretrain_windows(),
        pipe.vocab,
        mode,
        pipe.cfg.seed,
        generator=generator,
        mask_cfg=pipe.mask_cfg(),
        gen_cfg=pipe.gen_cfg(),
        noise_cfg=pipe.noise_cfg(pipe.cfg.generator.noise),
    )


# ---------------------------------------------------------------------------
# inspect


def format_example(ex: SSRExample, vocab: Vocab) -> str:
    def surf(ids):
        return " ".join(vocab.tokens[i] for i in ids) or "(empty)"

    lines = [
        f"id: {ex.id}  mode: {ex.mode}  bucket: {ex.bucket if ex.bucket is not None else '-'}",
        f"source: {surf(ex.source_ids)}",
        f"target: {surf(ex.target_ids)}",
    ]
    if ex.spans:
        w_gt = max(12, *(len(surf(r.gt)) for r in ex.spans))
        w_imp = max(9, *(len(surf(r.imp)) for r in ex.spans))
        lines.append(f"{'span':>4}  {'start':>5}  {'ground truth':<{w_gt}}  {'imperfect':<{w_imp}}  nll per token  sum")
        for r in ex.spans:
            per = " ".join(f"{x:.2f}" for x in r.nll) or "-"
            lines.append(f"{r.index:>4}  {r.start:>5}  {surf(r.gt):<{w_gt}}  {surf(r.imp):<{w_imp}}  {per:<13}  {sum(r.nll):.2f}")
        parts = " + ".join(f"{sum(r.nll):.2f}" for r in ex.spans)
        lines.append(f"difficulty = {parts} = {ex.difficulty:.2f}")
    return "\n".join(lines)


def _data_file(name: str) -> Path:
    return Path(str(resources.files("spanrewrite") / "data" / name))


def cmd_inspect(args, pipe: Pipeline | None) -> int:
    if args.demo:
        dataset, vocab_path = _data_file("elon_demo.jsonl"), _data_file("elon_demo.vocab.txt")
    else:
        dataset = Path(args.dataset) if args.dataset else pipe.need(pipe.data_path("ssr"), "build-dataset --mode ssr")
        vocab_path = Path(args.vocab) if args.vocab else pipe.need(pipe.vocab_path, "build-vocab")
    vocab = Vocab.load(vocab_path)
    for ex in load_dataset(dataset):
        if args.example_id is None or ex.id == args.example_id:
            print(format_example(ex, vocab))
            return 0
    raise PipelineError(f"no record with id {args.example_id!r} in {dataset}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spanrewrite", description="Sequence span rewriting pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML config (default: bundled demo config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--force", action="store_true", help="redo stages whose outputs exist")
    common.add_argument("--generator", help="ngram | rule | identity | self | external:<cmdline>")
    common.add_argument("--strategy", help="curriculum | none | anti | loss-only | length-only")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("build-vocab", "train-generator", "score-curriculum", "build-task", "run-all"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("build-dataset", parents=[common])
    p.add_argument("--mode", default="ssr", choices=["infill", "ssr", "distill", "denoise"])
    p = sub.add_parser("pretrain", parents=[common])
    p.add_argument("--objective", default="ssr", choices=["infill", "ssr", "distill", "denoise"])
    p = sub.add_parser("finetune", parents=[common])
    p.add_argument("--init", default="ssr", help="checkpoint name under ckpt/ to start from")
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--checkpoint", default="finetune", help="checkpoint name under ckpt/")
    p = sub.add_parser("inspect", parents=[common])
    p.add_argument("example_id", nargs="?")
    p.add_argument("--dataset")
    p.add_argument("--vocab")
    p.add_argument("--demo", action="store_true", help="inspect the bundled demo record")
    p = sub.add_parser("ablate-curriculum", parents=[common])
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p = sub.add_parser("make-demo-corpus", help="write a synthetic corpus")
    p.add_argument("path")
    p.add_argument("-n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out:
        out["output_dir"] = args.out
    if args.generator:
        out["generator.kind"] = args.generator
    if args.strategy:
        out["curriculum.strategy"] = args.strategy
    return out


def _print_table(table: dict) -> None:
    cols = ("strategy", "f05", "p", "r", "exact_match", "rouge_l")
    print("  ".join(f"{c:>12}" for c in cols))
    for row in table["rows"]:
        print("  ".join(f"{row[c]:>12}" if isinstance(row[c], str) else f"{row[c]:>12.4f}" for c in cols))


def run(args) -> int:
    if args.command == "make-demo-corpus":
        from .synth import write_corpus

        write_corpus(args.path, args.n, args.seed)
        return 0
    if args.command == "inspect" and args.demo:
        return cmd_inspect(args, None)
    cfg = load_config(args.config, _overrides(args))
    # output_dir is relative to the working directory, input paths to the config file
    out = Path(args.out or cfg.output_dir)
    pipe = Pipeline(cfg, out, force=args.force)
    if args.command == "inspect":
        return cmd_inspect(args, pipe)
    with OutputLock(out):
        c = args.command
        if c == "build-vocab":
            pipe.build_vocab()
        elif c == "train-generator":
            pipe.train_generator()
        elif c == "build-dataset":
            pipe.build_dataset(args.mode)
        elif c == "score-curriculum":
            pipe.score_curriculum()
        elif c == "pretrain":
            pipe.pretrain(args.objective)
        elif c == "build-task":
            pipe.build_task()
        elif c == "finetune":
            pipe.finetune(args.init)
        elif c == "evaluate":
            print(json.dumps(pipe.evaluate(args.checkpoint), sort_keys=True))
        elif c == "run-all":
            print(json.dumps(pipe.run_all(), sort_keys=True))
        elif c == "ablate-curriculum":
            _print_table(pipe.ablate([s for s in args.strategies.split(",") if s]))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return run(args)
    except ConfigError as e:
        print(json.dumps({"command": args.command, "error": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:  # one-line error contract for every failure
        if getattr(args, "verbose", False):
            log.exception("failure")
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(json.dumps({"command": args.command, "error": msg}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
