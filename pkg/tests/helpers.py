"""Shared constants and small utilities for the test suite."""

ELON = "In 2002, Elon Musk founded SpaceX, an aerospace manufacturer company."


def words(ids, vocab):
    return [vocab.tokens[i] for i in ids]


def tiny_config(tmp_path, **extra):
    """Write a fast pipeline config over the bundled demo corpus and return its path."""
    import yaml
    from importlib import resources

    corpus = str(resources.files("spanrewrite") / "data" / "demo_corpus.txt")
    stage = {"steps": 6, "warmup_steps": 2, "eval_every": 3, "batch_size": 8, "dev_limit": 10}
    cfg = {
        "seed": 0,
        "output_dir": str(tmp_path / "out"),
        "corpus": {"paths": [corpus], "max_len": 32},
        "vocab": {"max_size": 600},
        "generator": {"kind": "ngram"},
        "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_decode_len": 40},
        "train": {"infill": stage, "ssr": stage, "finetune": stage},
        "task": {"n_docs": 200, "split": [0.6, 0.2, 0.2]},
    }
    for key, value in extra.items():
        node = cfg
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path
