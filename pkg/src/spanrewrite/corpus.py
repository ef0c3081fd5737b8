"""Corpus ingestion, word-level tokenization and vocabulary handling."""

from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
DEFAULT_MAX_SENTINELS = 40

# Words (unicode \w runs) or single punctuation marks.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
# Literal sentinel-looking markup in raw text is stripped before splitting.
_SENTINEL_RE = re.compile(r"</?(?:s|M)_\d+>")


def mask_surface(i: int) -> str:
    return f"<M_{i}>"


def open_surface(i: int) -> str:
    return f"<s_{i}>"


def close_surface(i: int) -> str:
    return f"</s_{i}>"


@dataclass
class Vocab:
    """Dense id <-> surface mapping with a reserved low range of specials.

    Layout: ``<pad> <unk> <bos> <eos>``, then mask sentinels ``<M_1>..``,
    span-open sentinels ``<s_1>..`` and span-close sentinels ``</s_1>..``,
    each family ``max_sentinels`` long, then corpus tokens.
    """

    tokens: list[str]
    freqs: list[int]
    max_sentinels: int = DEFAULT_MAX_SENTINELS
    id_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise ValueError("duplicate surface forms in vocabulary")
        expected = special_surfaces(self.max_sentinels)
        if self.tokens[: len(expected)] != expected:
            raise ValueError("vocabulary does not start with the special block")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return 0

    @property
    def unk(self) -> int:
        return 1

    @property
    def bos(self) -> int:
        return 2

    @property
    def eos(self) -> int:
        return 3

    @property
    def n_specials(self) -> int:
        return 4 + 3 * self.max_sentinels

    def mask_id(self, i: int) -> int:
        self._check_index(i)
        return 4 + i - 1

    def open_id(self, i: int) -> int:
        self._check_index(i)
        return 4 + self.max_sentinels + i - 1

    def close_id(self, i: int) -> int:
        self._check_index(i)
        return 4 + 2 * self.max_sentinels + i - 1

    def _check_index(self, i: int) -> None:
        if not 1 <= i <= self.max_sentinels:
            raise ValueError(f"sentinel index {i} outside 1..{self.max_sentinels}")

    def is_sentinel(self, tid: int) -> bool:
        return 4 <= tid < self.n_specials

    def is_special(self, tid: int) -> bool:
        return 0 <= tid < self.n_specials

    def sentinel_kind(self, tid: int) -> tuple[str, int] | None:
        """Return ``("mask"|"open"|"close", index)`` for sentinel ids, else None."""
        if not self.is_sentinel(tid):
            return None
        off = tid - 4
        fam, idx = divmod(off, self.max_sentinels)
        return ("mask", "open", "close")[fam], idx + 1

    def content_ids(self) -> list[int]:
        """Ids a generator may emit: UNK plus every corpus token."""
        return [self.unk] + list(range(self.n_specials, len(self.tokens)))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, freq in zip(self.tokens, self.freqs):
                fh.write(f"{tok}\t{freq}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        tokens, freqs = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    tok, freq = line.rsplit("\t", 1)
                    freqs.append(int(freq))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: malformed vocab line {line!r}") from None
                tokens.append(tok)
        n_sent = sum(1 for t in tokens if t.startswith("<M_"))
        return cls(tokens, freqs, max_sentinels=n_sent)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    doc_id: str

    def __len__(self) -> int:
        return len(self.ids)


def special_surfaces(max_sentinels: int = DEFAULT_MAX_SENTINELS) -> list[str]:
    out = [PAD, UNK, BOS, EOS]
    out += [mask_surface(i) for i in range(1, max_sentinels + 1)]
    out += [open_surface(i) for i in range(1, max_sentinels + 1)]
    out += [close_surface(i) for i in range(1, max_sentinels + 1)]
    return out


def split_words(text: str, lowercase: bool = False) -> list[str]:
    text = _SENTINEL_RE.sub(" ", text)
    if lowercase:
        text = text.lower()
    return _TOKEN_RE.findall(text)


def build_vocab(
    corpus: Iterable[str],
    max_size: int,
    min_freq: int = 1,
    lowercase: bool = False,
    max_sentinels: int = DEFAULT_MAX_SENTINELS,
) -> Vocab:
    """Count words over ``corpus`` and keep the most frequent ones.

    ``max_size`` includes the special block. Frequency ties are broken
    lexicographically so the result depends only on the multiset of words.
    """
    if max_sentinels < 1:
        raise ValueError("max_sentinels must be >= 1")
    specials = special_surfaces(max_sentinels)
    if max_size <= len(specials):
        raise ValueError(f"max_size must exceed the {len(specials)} special tokens")
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(split_words(doc, lowercase))
    if n_docs == 0 or not counts:
        raise ValueError("empty corpus")
    return vocab_from_counts(counts, max_size, min_freq, max_sentinels)


def vocab_from_counts(counts, max_size, min_freq=1, max_sentinels=DEFAULT_MAX_SENTINELS) -> Vocab:
    specials = special_surfaces(max_sentinels)
    reserved = set(specials)
    ranked = sorted(
        ((w, c) for w, c in counts.items() if c >= min_freq and w not in reserved),
        key=lambda wc: (-wc[1], wc[0]),
    )
    ranked = ranked[: max_size - len(specials)]
    return Vocab(
        specials + [w for w, _ in ranked],
        [0] * len(specials) + [c for _, c in ranked],
        max_sentinels=max_sentinels,
    )


def tokenize(text: str, vocab: Vocab, doc_id: str = "", lowercase: bool = False) -> TokenSeq:
    unk = vocab.unk
    n_spec = vocab.n_specials
    ids = []
    for w in split_words(text, lowercase):
        tid = vocab.id_of.get(w, unk)
        # specials are never produced from raw text
        ids.append(tid if tid >= n_spec else unk)
    return TokenSeq(tuple(ids), doc_id)


def detokenize(seq, vocab: Vocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    n = len(vocab)
    out = []
    for tid in ids:
        if not 0 <= tid < n:
            raise ValueError(f"invalid token id {tid}")
        out.append(vocab.tokens[tid])
    return " ".join(out)


def iter_documents(paths: Iterable[str | os.PathLike]) -> Iterator[str]:
    """Yield non-blank lines from files, expanding directories in sorted order."""
    for p in expand_paths(paths):
        with open(p, encoding="utf-8", errors="strict") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield line


def expand_paths(paths: Iterable[str | os.PathLike]) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.is_file():
            out.append(p)
        else:
            raise FileNotFoundError(f"corpus path not found: {p}")
    return out


def windows(seq: TokenSeq, max_len: int) -> list[TokenSeq]:
    """Split a document into contiguous windows of at most ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(seq) <= max_len:
        return [TokenSeq(seq.ids, f"{seq.doc_id}.w000")]
    return [
        TokenSeq(seq.ids[i : i + max_len], f"{seq.doc_id}.w{k:03d}")
        for k, i in enumerate(range(0, len(seq), max_len))
    ]


def load_windows(
    paths, vocab: Vocab, max_len: int = 64, lowercase: bool = False, min_len: int = 2
) -> list[TokenSeq]:
    """Tokenize every document and return its windows (short leftovers dropped)."""
    out = []
    for n, doc in enumerate(iter_documents(paths)):
        seq = tokenize(doc, vocab, doc_id=f"d{n:07d}", lowercase=lowercase)
        out.extend(w for w in windows(seq, max_len) if len(w) >= min_len)
    return out
