"""Keyword extraction and mean-of-word-vectors tweet embedding."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class VectorLoadError(ValueError):
    pass


@lru_cache(maxsize=None)
def stop_words() -> frozenset[str]:
    text = resources.files("geoevents.data").joinpath("stopwords.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines()
                     if w.strip() and not w.startswith("#"))


_TOKEN = re.compile(r"[#@]?\w+(?:'\w+)*", re.UNICODE)


def _tokens(text: str):
    return list(_TOKEN.finditer(text))


def extract_keywords(text: str, extra_stop_words: Iterable[str] = ()) -> list[str]:
    """Hashtags, mentions and runs of capitalized words, lowercased, in text order.

    A run is broken by anything other than whitespace between two capitalized
    words, and by stop words.
    """
    stops = stop_words() | {w.lower() for w in extra_stop_words}
    out: list[str] = []
    run: list[str] = []
    prev_end = None

    def flush():
        if run:
            out.append(" ".join(run))
            run.clear()

    for m in _tokens(text):
        tok = m.group(0)
        if prev_end is not None and text[prev_end:m.start()].strip():
            flush()
        prev_end = m.end()
        if tok[0] in "#@":
            flush()
            prev_ch = text[m.start() - 1] if m.start() > 0 else " "
            if not (prev_ch.isalnum() or prev_ch == "_"):
                out.append(tok[1:].lower())
            continue
        if tok[0].isupper() and tok.lower() not in stops:
            run.append(tok.lower())
        else:
            flush()
    flush()
    return out


def text_tokens(text: str) -> list[str]:
    """Lowercased word tokens with '#'/'@' markers stripped and stop words removed."""
    stops = stop_words()
    out = []
    for m in _tokens(text):
        tok = m.group(0).lstrip("#@").lower()
        if tok and tok not in stops:
            out.append(tok)
    return out


def _fnv1a(s: str) -> int:
    h = 2166136261
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


def char_ngrams(word: str, nmin: int = 3, nmax: int = 6) -> list[str]:
    w = f"<{word}>"
    return [w[i:i + n] for n in range(nmin, nmax + 1) for i in range(len(w) - n + 1)]


@dataclass
class VectorTable:
    dimension: int
    tokens: list[str]
    matrix: np.ndarray
    subword: bool = False
    buckets: int = 1 << 16
    _index: dict[str, int] = field(default_factory=dict, repr=False)
    _bucket_vectors: dict[int, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (len(self.tokens), self.dimension):
            raise ValueError("matrix shape does not match tokens x dimension")
        if not self._index:
            for i, tok in enumerate(self.tokens):
                self._index.setdefault(tok.lower(), i)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self._index

    def _build_buckets(self):
        sums: dict[int, np.ndarray] = {}
        counts: dict[int, int] = {}
        for tok, i in self._index.items():
            for g in char_ngrams(tok):
                b = _fnv1a(g) % self.buckets
                if b in sums:
                    sums[b] += self.matrix[i]
                    counts[b] += 1
                else:
                    sums[b] = self.matrix[i].copy()
                    counts[b] = 1
        self._bucket_vectors = {b: v / counts[b] for b, v in sums.items()}

    def lookup(self, token: str) -> np.ndarray | None:
        i = self._index.get(token.lower())
        if i is not None:
            return self.matrix[i]
        if not self.subword:
            return None
        # n-gram fallback: buckets hold the mean vector of known words sharing the n-gram
        if self._bucket_vectors is None:
            self._build_buckets()
        hits = [self._bucket_vectors[b] for b in
                (_fnv1a(g) % self.buckets for g in char_ngrams(token.lower()))
                if b in self._bucket_vectors]
        if not hits:
            return None
        return np.mean(hits, axis=0)


def load_vectors(path: str | Path, subword: bool = False) -> VectorTable:
    """Read a text vector file: header ``N d`` then ``token f1 ... fd`` per line."""
    tokens: list[str] = []
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise VectorLoadError(f"{path}:1: header must be 'N d'")
        try:
            n, d = int(header[0]), int(header[1])
        except ValueError:
            raise VectorLoadError(f"{path}:1: header must hold two integers") from None
        if n < 0 or d < 1:
            raise VectorLoadError(f"{path}:1: bad header values {n} {d}")
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").split(" ")
            if parts == [""]:
                continue
            if len(parts) != d + 1:
                raise VectorLoadError(f"{path}:{lineno}: expected {d} values, got {len(parts) - 1}")
            try:
                vals = [float(x) for x in parts[1:]]
            except ValueError:
                raise VectorLoadError(f"{path}:{lineno}: non-numeric value") from None
            if not np.all(np.isfinite(vals)):
                raise VectorLoadError(f"{path}:{lineno}: non-finite value")
            tokens.append(parts[0].lower())
            rows.append(vals)
    if len(tokens) != n:
        raise VectorLoadError(f"{path}: header announces {n} tokens, found {len(tokens)}")
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return VectorTable(d, tokens, matrix, subword=subword)


def save_vectors(path: str | Path, tokens: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(tokens)} {matrix.shape[1]}\n")
        for tok, row in zip(tokens, matrix):
            fh.write(tok + " " + " ".join(repr(float(x)) for x in row) + "\n")


def default_vectors_path() -> Path:
    """The bundled 64-dimension table covering the synthetic topic vocabulary."""
    return Path(str(resources.files("geoevents.data").joinpath("mini_vectors.txt")))


@dataclass(frozen=True)
class TweetVector:
    tweet_id: str
    vector: np.ndarray
    keyword_count: int


def embed_keywords(keywords: Sequence[str], table: VectorTable,
                   tweet_id: str = "") -> TweetVector | None:
    """Mean of keyword vectors; a multi-word keyword contributes the mean of its words."""
    vecs = []
    for kw in keywords:
        v = table.lookup(kw)
        if v is None and " " in kw:
            parts = [table.lookup(w) for w in kw.split()]
            parts = [p for p in parts if p is not None]
            if parts:
                v = np.mean(parts, axis=0)
        if v is not None:
            vecs.append(v)
    if not vecs:
        return None
    return TweetVector(tweet_id, np.mean(vecs, axis=0), len(vecs))


def embed_text(text: str, table: VectorTable, tweet_id: str = "") -> TweetVector | None:
    vecs = [v for v in (table.lookup(t) for t in text_tokens(text)) if v is not None]
    if not vecs:
        return None
    return TweetVector(tweet_id, np.mean(vecs, axis=0), len(vecs))
