"""Unconditioned noisy-channel completion index and discrete baselines.

Candidates are scored for a typed prefix ``t`` as ``P(q) * P(t | q)``: the
prior comes from search-log frequencies, the error model is a fixed
single-substitution typo model. Every reachable prefix stores its top
completions at build time, so a lookup is a single hash access.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .ingest import SearchLogEntry, normalize_query

INDEX_HEADER = "# sessionqac-index v1"

_QWERTY_ROWS = ("qwertyuiop", "asdfghjkl", "zxcvbnm")


def qwerty_adjacency() -> dict[str, dict[str, float]]:
    """Uniform confusion weights over physically adjacent letter keys."""
    pos = {ch: (r, c + 0.5 * r) for r, row in enumerate(_QWERTY_ROWS) for c, ch in enumerate(row)}
    table: dict[str, dict[str, float]] = {}
    for a, (ra, ca) in pos.items():
        near = sorted(b for b, (rb, cb) in pos.items() if b != a and abs(ra - rb) <= 1 and abs(ca - cb) <= 1.0)
        table[a] = {b: 1.0 / len(near) for b in near}
    return table


class IndexBuildError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateEntry:
    query: str
    prior: float
    query_vector: np.ndarray | None = None


@dataclass(frozen=True)
class ErrorModel:
    """P(t | q) for a typed prefix t of candidate q.

    The exact prefix receives ``exact_match_mass``; the remainder is spread
    over single-character substitutions, uniformly across positions and by
    the confusion weights within a position. With ``max_edits=0`` or a mass
    of 1.0 the model reduces to exact prefix matching.
    """

    exact_match_mass: float = 0.9
    max_edits: int = 1
    confusions: Mapping[str, Mapping[str, float]] = field(default_factory=qwerty_adjacency)

    def __post_init__(self) -> None:
        if not 0.0 < self.exact_match_mass <= 1.0:
            raise ValueError("exact_match_mass must be in (0, 1]")
        if self.max_edits not in (0, 1):
            raise ValueError("only max_edits of 0 or 1 is supported")
        norm = {}
        for src, row in self.confusions.items():
            total = sum(w for w in row.values() if w > 0)
            scale = 1.0 if abs(total - 1.0) < 1e-12 else total  # keeps normalization idempotent across save/load
            norm[src] = {dst: w / scale for dst, w in row.items() if w > 0 and dst != src} if total > 0 else {}
        object.__setattr__(self, "confusions", norm)

    @property
    def allows_typos(self) -> bool:
        return self.max_edits > 0 and self.exact_match_mass < 1.0

    def prob(self, typed: str, query: str) -> float:
        n = len(typed)
        if n > len(query):
            return 0.0
        if n == 0:
            return 1.0
        true_prefix = query[:n]
        if typed == true_prefix:
            return self.exact_match_mass
        if not self.allows_typos:
            return 0.0
        diffs = [i for i in range(n) if typed[i] != true_prefix[i]]
        if len(diffs) != 1:
            return 0.0
        i = diffs[0]
        w = self.confusions.get(true_prefix[i], {}).get(typed[i], 0.0)
        return (1.0 - self.exact_match_mass) * w / n

    def typo_variants(self, true_prefix: str) -> list[tuple[str, float]]:
        """All typed strings other than ``true_prefix`` with non-zero probability."""
        if not self.allows_typos or not true_prefix:
            return []
        n = len(true_prefix)
        out = []
        for i, ch in enumerate(true_prefix):
            for dst, w in self.confusions.get(ch, {}).items():
                out.append((true_prefix[:i] + dst + true_prefix[i + 1:], (1.0 - self.exact_match_mass) * w / n))
        return out

    def to_json(self) -> dict:
        return {
            "exact_match_mass": self.exact_match_mass,
            "max_edits": self.max_edits,
            "confusions": {k: dict(sorted(v.items())) for k, v in sorted(self.confusions.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ErrorModel":
        return cls(data["exact_match_mass"], data["max_edits"], data["confusions"])


def estimate_priors(search_log: Sequence[SearchLogEntry]) -> list[CandidateEntry]:
    """Maximum-likelihood query priors from search frequencies."""
    counts = Counter(normalize_query(e.query) for e in search_log)
    counts.pop("", None)
    if not counts:
        raise IndexBuildError("cannot estimate priors from an empty search log")
    total = sum(counts.values())
    return [CandidateEntry(q, c / total) for q, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def normalize_prefix(prefix: str) -> str:
    """Lowercase and collapse whitespace, keeping a single trailing space."""
    return re.sub(r"\s+", " ", prefix.lower()).lstrip()


def _rank_key(item: tuple[str, float, float]) -> tuple[float, float, str]:
    query, score, prior = item
    return (-score, -prior, query)


@dataclass
class TrieIndex:
    """Prefix -> precomputed top completions, plus the candidate table."""

    lists: dict[str, tuple[tuple[str, float], ...]]
    candidates: dict[str, CandidateEntry]
    error_model: ErrorModel
    max_fanout: int
    by_prior: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.by_prior:
            self.by_prior = tuple(sorted(self.candidates, key=lambda q: (-self.candidates[q].prior, q)))

    def top_by_prior(self, u: int) -> list[str]:
        return list(self.by_prior[:u])


def build_trie(candidates: Sequence[CandidateEntry], error_model: ErrorModel | None = None,
               max_fanout: int = 25) -> TrieIndex:
    if max_fanout < 1:
        raise IndexBuildError("max_fanout must be >= 1")
    error_model = error_model or ErrorModel()
    total = sum(c.prior for c in candidates)
    if candidates and abs(total - 1.0) > 1e-9:
        raise IndexBuildError(f"priors sum to {total!r}, expected 1")
    table = {c.query: c for c in candidates}
    if len(table) != len(candidates):
        raise IndexBuildError("duplicate candidate queries")
    pool: dict[str, dict[str, tuple[float, float]]] = defaultdict(dict)
    for c in candidates:
        q = c.query
        for n in range(len(q) + 1):
            true_prefix = q[:n]
            pool[true_prefix][q] = (c.prior * error_model.prob(true_prefix, q), c.prior)
            for typed, factor in error_model.typo_variants(true_prefix):
                pool[typed][q] = (c.prior * factor, c.prior)
    lists = {}
    for prefix, scored in pool.items():
        items = sorted(((q, s, p) for q, (s, p) in scored.items() if s > 0), key=_rank_key)[:max_fanout]
        if items:
            lists[prefix] = tuple((q, s) for q, s, _ in items)
    return TrieIndex(lists, table, error_model, max_fanout)


def retrieve(index: TrieIndex, prefix: str, n: int) -> list[tuple[str, float]]:
    if n < 1:
        raise IndexBuildError("n must be >= 1")
    return list(index.lists.get(normalize_prefix(prefix), ())[:n])


def brute_force_rank(candidates: Iterable[CandidateEntry], error_model: ErrorModel, prefix: str) -> list[tuple[str, float]]:
    """Score every candidate against ``prefix``; the reference the index must reproduce."""
    items = [(c.query, c.prior * error_model.prob(prefix, c.query), c.prior) for c in candidates]
    return [(q, s) for q, s, _ in sorted((it for it in items if it[1] > 0), key=_rank_key)]


def save_index(index: TrieIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(INDEX_HEADER + "\n")
        fh.write(json.dumps({"max_fanout": index.max_fanout, "error_model": index.error_model.to_json()},
                            sort_keys=True) + "\n")
        for q in sorted(index.candidates):
            fh.write(f"C\t{q}\t{index.candidates[q].prior!r}\n")
        for prefix in sorted(index.lists):
            cells = "\t".join(f"{q}\t{s!r}" for q, s in index.lists[prefix])
            fh.write(f"P\t{prefix}\t{cells}\n")


def load_index(path: str | Path) -> TrieIndex:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != INDEX_HEADER:
            raise IndexBuildError(f"{path}: expected header {INDEX_HEADER!r}, got {header!r}")
        meta = json.loads(fh.readline())
        candidates: dict[str, CandidateEntry] = {}
        lists: dict[str, tuple[tuple[str, float], ...]] = {}
        for line in fh:
            cols = line.rstrip("\n").split("\t")
            if cols[0] == "C":
                candidates[cols[1]] = CandidateEntry(cols[1], float(cols[2]))
            elif cols[0] == "P":
                rest = cols[2:]
                lists[cols[1]] = tuple((rest[i], float(rest[i + 1])) for i in range(0, len(rest), 2))
            else:
                raise IndexBuildError(f"{path}: unknown record type {cols[0]!r}")
    return TrieIndex(lists, candidates, ErrorModel.from_json(meta["error_model"]), meta["max_fanout"])


# -- Markov baseline --------------------------------------------------------

BOS, EOS, UNK = "<s>", "</s>", "<unk>"


class MarkovScore(NamedTuple):
    logprob: float
    used_fallback: bool


@dataclass
class MarkovModel:
    """Per-bucket token bigram counts with Laplace smoothing."""

    bigrams: dict[str, Counter]  # bucket -> Counter[(prev, next)]
    contexts: dict[str, Counter]  # bucket -> Counter[prev]
    vocab: frozenset[str]  # outcome space, includes EOS and UNK
    alpha: float = 1.0
    global_bucket: str = "*"

    def prob(self, bucket: str, prev: str, nxt: str) -> float:
        big, ctx = self.bigrams[bucket], self.contexts[bucket]
        return (big[(prev, nxt)] + self.alpha) / (ctx[prev] + self.alpha * len(self.vocab))


def _tokens(query: str) -> list[str]:
    return normalize_query(query).split()


def fit_markov(pairs: Iterable[tuple[str, str]], alpha: float = 1.0) -> MarkovModel:
    """Fit from (bucket, query) training pairs; a global bucket pools all of them."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    bigrams: dict[str, Counter] = defaultdict(Counter)
    contexts: dict[str, Counter] = defaultdict(Counter)
    vocab = {EOS, UNK}
    for bucket, query in pairs:
        toks = _tokens(query)
        if not toks:
            continue
        vocab.update(toks)
        seq = [BOS, *toks, EOS]
        for prev, nxt in zip(seq, seq[1:]):
            for b in (bucket, "*"):
                bigrams[b][(prev, nxt)] += 1
                contexts[b][prev] += 1
    bigrams.setdefault("*", Counter())
    contexts.setdefault("*", Counter())
    return MarkovModel(dict(bigrams), dict(contexts), frozenset(vocab), alpha)


def markov_score(model: MarkovModel, bucket: str | None, query: str) -> MarkovScore:
    toks = _tokens(query)
    if not toks:
        raise ValueError("query has no tokens")
    fallback = bucket is None or bucket not in model.bigrams
    b = model.global_bucket if fallback else bucket
    seq = [BOS, *(t if t in model.vocab else UNK for t in toks), EOS]
    return MarkovScore(sum(math.log(model.prob(b, p, n)) for p, n in zip(seq, seq[1:])), fallback)


def session_bucket(categories: Sequence[str | None]) -> str | None:
    """Modal category of the viewed products; ties go to the most recent view."""
    seen = [c for c in categories if c is not None]
    if not seen:
        return None
    counts = Counter(seen)
    best = max(counts.values())
    for c in reversed(seen):
        if counts[c] == best:
            return c
    return None  # unreachable


MARKOV_HEADER = "# sessionqac-markov v1"


def save_markov(model: MarkovModel, path: str | Path) -> None:
    """One ``bucket<TAB>prev<TAB>next<TAB>count`` line per bigram, sorted."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MARKOV_HEADER + "\n")
        fh.write(json.dumps({"alpha": model.alpha, "vocab": sorted(model.vocab),
                             "global_bucket": model.global_bucket}, sort_keys=True) + "\n")
        for bucket in sorted(model.bigrams):
            for (prev, nxt), count in sorted(model.bigrams[bucket].items()):
                fh.write(f"{bucket}\t{prev}\t{nxt}\t{count}\n")


def load_markov(path: str | Path) -> MarkovModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MARKOV_HEADER:
        raise ValueError(f"{path}: not a markov model file")
    meta = json.loads(lines[1])
    bigrams: dict[str, Counter] = defaultdict(Counter)
    contexts: dict[str, Counter] = defaultdict(Counter)
    for line in lines[2:]:
        bucket, prev, nxt, count = line.split("\t")
        bigrams[bucket][(prev, nxt)] = int(count)
        contexts[bucket][prev] += int(count)
    bigrams.setdefault(meta["global_bucket"], Counter())
    contexts.setdefault(meta["global_bucket"], Counter())
    return MarkovModel(dict(bigrams), dict(contexts), frozenset(meta["vocab"]), meta["alpha"], meta["global_bucket"])
