"""Catalog, event-log and search-log parsing plus a synthetic dataset generator.

All formats are UTF-8, tab separated, one record per line; lines starting
with ``#`` are comments.

    catalog     sku<TAB>shop_id<TAB>category<TAB>v1,v2,...,vD
    events      timestamp<TAB>session_id<TAB>event_type<TAB>payload
    search log  query<TAB>sku:count;sku:count;...

Event payloads are ``key=value`` pairs joined with ``&`` and percent-encoded,
e.g. ``sku=0206395&shop=site1`` or ``q=drake got``.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence
from urllib.parse import parse_qsl, quote

import numpy as np


class IngestError(ValueError):
    """Base class for malformed input files."""


class ParseError(IngestError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class SchemaError(ParseError):
    pass


def normalize_query(text: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return " ".join(text.lower().split())


class EventType(str, enum.Enum):
    VIEW = "view"
    SUGGEST = "suggest"
    SEARCH = "search"
    CLICK = "click"


@dataclass(frozen=True)
class CatalogRecord:
    sku: str
    shop_id: str
    category: str
    raw_vector: tuple[float, ...]


@dataclass(frozen=True)
class SessionEvent:
    timestamp: int
    session_id: str
    event_type: EventType
    sku: str | None = None
    query: str | None = None
    picked: str | None = None
    shop_id: str | None = None

    def payload(self) -> str:
        pairs: list[tuple[str, str]] = []
        if self.sku is not None:
            pairs.append(("sku", self.sku))
        if self.query is not None:
            pairs.append(("q", self.query))
        if self.picked is not None:
            pairs.append(("pick", self.picked))
        if self.shop_id is not None:
            pairs.append(("shop", self.shop_id))
        return "&".join(f"{k}={quote(v, safe=' ')}" for k, v in pairs)


@dataclass(frozen=True)
class SearchLogEntry:
    query: str
    clicked_skus: tuple[tuple[str, int], ...]
    shop_id: str

    @property
    def total_clicks(self) -> int:
        return sum(c for _, c in self.clicked_skus)


def _data_lines(path: Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def _parse_float(text: str, lineno: int, path: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", lineno, path) from None
    if not math.isfinite(value):
        raise SchemaError(f"non-finite vector entry {text!r}", lineno, path)
    return value


# -- catalogs ---------------------------------------------------------------


def load_catalog(path: str | Path, shop_id: str) -> list[CatalogRecord]:
    path = Path(path)
    records: list[CatalogRecord] = []
    seen: dict[str, int] = {}
    dim: int | None = None
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 4:
            raise ParseError(f"expected 4 tab-separated columns, got {len(cols)}", lineno, str(path))
        sku, row_shop, category, vec_text = cols
        if not sku:
            raise ParseError("empty sku", lineno, str(path))
        if row_shop != shop_id:
            raise SchemaError(f"row shop {row_shop!r} does not match {shop_id!r}", lineno, str(path))
        vec = tuple(_parse_float(v, lineno, str(path)) for v in vec_text.split(","))
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise SchemaError(f"vector has dimension {len(vec)}, catalog dimension is {dim}", lineno, str(path))
        if sku in seen:
            raise SchemaError(f"duplicate sku {sku!r} (first seen at line {seen[sku]})", lineno, str(path))
        seen[sku] = lineno
        records.append(CatalogRecord(sku, row_shop, category, vec))
    return records


def write_catalog(records: Iterable[CatalogRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# sku\tshop_id\tcategory\tvector\n")
        for r in records:
            fh.write(f"{r.sku}\t{r.shop_id}\t{r.category}\t{','.join(repr(float(v)) for v in r.raw_vector)}\n")


# -- events -----------------------------------------------------------------


def parse_event_line(line: str, lineno: int | None = None, path: str | None = None) -> SessionEvent:
    cols = line.split("\t")
    if len(cols) != 4:
        raise ParseError(f"expected 4 tab-separated columns, got {len(cols)}", lineno, path)
    ts_text, session_id, type_text, payload = cols
    try:
        ts = int(ts_text)
    except ValueError:
        raise ParseError(f"bad timestamp {ts_text!r}", lineno, path) from None
    try:
        etype = EventType(type_text.strip().lower())
    except ValueError:
        raise ParseError(f"unknown event_type {type_text!r}", lineno, path) from None
    fields = {k.strip().lower(): v for k, v in parse_qsl(payload, keep_blank_values=True)}
    sku = fields.get("sku")
    query = fields.get("q")
    if etype in (EventType.VIEW, EventType.CLICK) and not sku:
        raise ParseError(f"{etype.value} event without sku", lineno, path)
    if etype in (EventType.SEARCH, EventType.SUGGEST):
        if query is None:
            raise ParseError(f"{etype.value} event without q", lineno, path)
        query = normalize_query(query) if etype is EventType.SEARCH else query.lower()
        if etype is EventType.SEARCH and not query:
            raise ParseError("empty search query", lineno, path)
    picked = fields.get("pick")
    if picked is not None:
        picked = normalize_query(picked)
    return SessionEvent(ts, session_id, etype, sku=sku, query=query, picked=picked, shop_id=fields.get("shop"))


def format_event_line(ev: SessionEvent) -> str:
    return f"{ev.timestamp}\t{ev.session_id}\t{ev.event_type.value}\t{ev.payload()}"


def group_sessions(events: Iterable[SessionEvent]) -> dict[str, list[SessionEvent]]:
    """Group by session id (first-appearance order), each group stably time-sorted."""
    groups: dict[str, list[SessionEvent]] = {}
    for ev in events:
        groups.setdefault(ev.session_id, []).append(ev)
    return {sid: sorted(evs, key=lambda e: e.timestamp) for sid, evs in groups.items()}


def load_events(path: str | Path) -> dict[str, list[SessionEvent]]:
    path = Path(path)
    return group_sessions(parse_event_line(line, lineno, str(path)) for lineno, line in _data_lines(path))


def write_events(events: Iterable[SessionEvent], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# timestamp\tsession_id\tevent_type\tpayload\n")
        for ev in events:
            fh.write(format_event_line(ev) + "\n")


# -- search logs ------------------------------------------------------------


def load_search_log(path: str | Path, shop_id: str) -> list[SearchLogEntry]:
    path = Path(path)
    entries: list[SearchLogEntry] = []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 2:
            raise ParseError(f"expected 2 tab-separated columns, got {len(cols)}", lineno, str(path))
        query = normalize_query(cols[0])
        if not query:
            raise ParseError("empty query after normalization", lineno, str(path))
        clicks: list[tuple[str, int]] = []
        for item in filter(None, cols[1].split(";")):
            sku, sep, count_text = item.rpartition(":")
            if not sep or not sku:
                raise ParseError(f"bad click item {item!r}", lineno, str(path))
            try:
                count = int(count_text)
            except ValueError:
                raise ParseError(f"bad click count {count_text!r}", lineno, str(path)) from None
            if count <= 0:
                raise SchemaError(f"non-positive click count for {sku!r}", lineno, str(path))
            clicks.append((sku, count))
        entries.append(SearchLogEntry(query, tuple(clicks), shop_id))
    return entries


def write_search_log(entries: Iterable[SearchLogEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# query\tsku:count;...\n")
        for e in entries:
            fh.write(f"{e.query}\t{';'.join(f'{s}:{c}' for s, c in e.clicked_skus)}\n")


def search_log_from_events(sessions: Mapping[str, Sequence[SessionEvent]], shop_id: str) -> list[SearchLogEntry]:
    """One entry per search event, carrying the clicks that followed it.

    A click is credited to the most recent search in the same session.
    Entries are ordered by search timestamp, then session id.
    """
    rows: list[tuple[int, str, str, Counter[str]]] = []
    for sid, evs in sessions.items():
        current: Counter[str] | None = None
        for ev in evs:
            if ev.shop_id is not None and ev.shop_id != shop_id:
                continue
            if ev.event_type is EventType.SEARCH:
                current = Counter()
                rows.append((ev.timestamp, sid, ev.query, current))
            elif ev.event_type is EventType.CLICK and current is not None:
                current[ev.sku] += 1
    rows.sort(key=lambda r: (r[0], r[1]))
    return [SearchLogEntry(q, tuple(sorted(clicks.items())), shop_id) for _, _, q, clicks in rows]


# -- synthetic data ---------------------------------------------------------

_CATEGORY_WORDS = (
    "soccer", "tennis", "running", "ski", "yoga", "golf", "cycling", "swimming",
    "hiking", "basketball", "boxing", "climbing", "surf", "hockey", "baseball", "volleyball",
)
_SUBTYPE_WORDS = ("shoes", "jacket", "bag", "gloves", "pants", "socks", "ball", "helmet", "shirt", "shorts")
_GENERIC_WORDS = ("gear", "sale", "outlet", "kids", "women", "men")
_ONSETS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticConfig:
    rng_seed: int = 42
    n_categories: int = 8
    products_per_category: int = 40
    subtypes_per_category: int = 4
    vector_dim: int = 64
    category_spread: float = 1.0
    subtype_spread: float = 0.7  # relative to intra_category_noise
    intra_category_noise: float = 1.0
    shop_style_shift: float = 0.6
    n_sessions: int = 10000
    session_length_mean: float = 3.0
    session_length_max: int = 10
    off_intent_rate: float = 0.15
    subtype_focus: float = 0.7  # share of on-intent views and clicks matching the intended subtype
    broad_queries_per_category: int = 3
    brands_per_category: int = 6
    product_queries_per_brand: int = 3
    query_zipf: float = 0.8
    query_vocabulary: Mapping[str, Sequence[str]] | None = None
    cross_shop_fraction: float = 0.1
    shops: tuple[str, str] = ("site1", "site2")
    start_ms: int = 1559347200000
    days: int = 120
    train_fraction: float = 0.75

    def __post_init__(self) -> None:
        if not 0.0 <= self.cross_shop_fraction <= 1.0:
            raise ValueError("cross_shop_fraction must be in [0, 1]")
        for name in ("n_categories", "products_per_category", "subtypes_per_category", "vector_dim",
                     "n_sessions", "session_length_max", "broad_queries_per_category", "brands_per_category", "days"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.product_queries_per_brand < 0:
            raise ValueError("product_queries_per_brand must be non-negative")
        if self.session_length_mean < 1:
            raise ValueError("session_length_mean must be >= 1")
        for name in ("category_spread", "subtype_spread", "intra_category_noise", "shop_style_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.off_intent_rate < 1.0:
            raise ValueError("off_intent_rate must be in [0, 1)")
        if not 0.0 <= self.subtype_focus <= 1.0:
            raise ValueError("subtype_focus must be in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.shops[0] == self.shops[1]:
            raise ValueError("shops must be distinct")
        if self.query_vocabulary is not None and len(self.query_vocabulary) != self.n_categories:
            raise ValueError("query_vocabulary must list one entry per category")


@dataclass(frozen=True)
class QuerySpec:
    """A vocabulary entry: the query string and the products it leads to."""

    query: str
    category: str
    subtype: int | None  # None: clicks spread over the whole category
    product: int | None = None  # index within the subtype's products for single-product queries

    @property
    def tier(self) -> int:
        """Specificity: 0 broad, 1 subtype, 2 single product."""
        return 0 if self.subtype is None else (1 if self.product is None else 2)


@dataclass(frozen=True)
class IntentLabel:
    session_id: str
    shop_id: str
    category: str
    paired_session: str | None = None


@dataclass
class SyntheticDataset:
    catalogs: dict[str, list[CatalogRecord]]
    events: list[SessionEvent]
    search_logs: dict[str, list[SearchLogEntry]]
    labels: list[IntentLabel]
    boundary: int
    vocabularies: dict[str, list[QuerySpec]] = field(default_factory=dict)


def _category_names(n: int) -> list[str]:
    names = list(_CATEGORY_WORDS[:n])
    names += [f"sport{i}" for i in range(len(names), n)]
    return names


def _pseudo_word(rng: np.random.Generator, taken: set[str]) -> str:
    while True:
        n_syll = int(rng.integers(2, 4))
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syll))
        if word not in taken:
            taken.add(word)
            return word


def _build_vocabulary(cfg: SyntheticConfig, rng: np.random.Generator, categories: list[str],
                      taken: set[str]) -> list[QuerySpec]:
    vocab: list[QuerySpec] = []
    if cfg.query_vocabulary is not None:
        for cat in categories:
            for q in cfg.query_vocabulary[cat]:
                vocab.append(QuerySpec(normalize_query(q), cat, None))
        return vocab
    n_sub = cfg.subtypes_per_category
    for cat in categories:
        broad = [cat] + [f"{cat} {w}" for w in _GENERIC_WORDS[: cfg.broad_queries_per_category - 1]]
        vocab.extend(QuerySpec(q, cat, None) for q in broad)
        for _ in range(cfg.brands_per_category):
            brand = _pseudo_word(rng, taken)
            vocab.append(QuerySpec(f"{brand} {cat}", cat, None))
            for s in range(n_sub):
                vocab.append(QuerySpec(f"{brand} {_SUBTYPE_WORDS[s % len(_SUBTYPE_WORDS)]}", cat, s))
            for _ in range(cfg.product_queries_per_brand):
                s = int(rng.integers(n_sub))
                n_products = len(range(s, cfg.products_per_category, n_sub))
                vocab.append(QuerySpec(f"{brand} {_pseudo_word(rng, taken)}", cat, s, int(rng.integers(n_products))))
    return vocab


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Build two shop catalogs and a session log with planted shopper intent.

    Both shops sell the same categories, so product vectors share category
    centroids; each shop adds its own photographic style offset. Every
    session has a latent (category, subtype) intent: views are drawn from
    it (with a small off-intent rate), then one search among the queries
    compatible with the intent, followed by clicks on products matching
    both the query and the intent.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    categories = _category_names(cfg.n_categories)
    n_sub = cfg.subtypes_per_category
    dim = cfg.vector_dim

    centroids = rng.normal(0.0, cfg.category_spread, size=(cfg.n_categories, dim))
    sub_offsets = rng.normal(0.0, cfg.subtype_spread * cfg.intra_category_noise, size=(cfg.n_categories, n_sub, dim))
    taken = set(categories) | set(_SUBTYPE_WORDS) | set(_GENERIC_WORDS)

    catalogs: dict[str, list[CatalogRecord]] = {}
    products: dict[str, list[list[list[str]]]] = {}  # shop -> category -> subtype -> skus
    vocabularies: dict[str, list[QuerySpec]] = {}
    popularity: dict[str, list[np.ndarray]] = {}
    for s_idx, shop in enumerate(cfg.shops):
        style = rng.normal(0.0, cfg.shop_style_shift, size=dim)
        records = []
        by_cat: list[list[list[str]]] = []
        for c, cat in enumerate(categories):
            subs: list[list[str]] = [[] for _ in range(n_sub)]
            for p in range(cfg.products_per_category):
                sub = p % n_sub
                vec = centroids[c] + sub_offsets[c, sub] + style
                if cfg.intra_category_noise > 0:
                    vec = vec + rng.normal(0.0, cfg.intra_category_noise, size=dim)
                sku = f"{s_idx + 1}{c:03d}{p:04d}"
                records.append(CatalogRecord(sku, shop, cat, tuple(float(v) for v in vec)))
                subs[sub].append(sku)
            by_cat.append(subs)
        catalogs[shop] = records
        products[shop] = by_cat
        vocab = _build_vocabulary(cfg, rng, categories, taken)
        vocabularies[shop] = vocab
        weights = []
        for cat in categories:
            # head queries are broad, the tail is specific; order is random within a tier
            tiers = np.array([q.tier for q in vocab if q.category == cat])
            order = np.lexsort((rng.permutation(len(tiers)), tiers == 2))
            ranks = np.empty(len(tiers))
            ranks[order] = np.arange(1, len(tiers) + 1)
            w = 1.0 / ranks ** cfg.query_zipf
            weights.append(w / w.sum())
        popularity[shop] = weights

    cat_weights = 1.0 / np.arange(1, cfg.n_categories + 1) ** 0.5
    cat_weights = rng.permutation(cat_weights / cat_weights.sum())
    by_cat_vocab = {shop: [[q for q in vocabularies[shop] if q.category == cat] for cat in categories]
                    for shop in cfg.shops}

    span_ms = cfg.days * 86_400_000
    boundary = cfg.start_ms + int(span_ms * cfg.train_fraction)
    events: list[SessionEvent] = []
    labels: list[IntentLabel] = []
    used_ids: set[str] = set()

    def new_session_id() -> str:
        while True:
            sid = f"{int(rng.integers(0, 2**62)):016x}"
            if sid not in used_ids:
                used_ids.add(sid)
                return sid

    def pick_subtype(intended: int) -> int:
        return intended if rng.random() < cfg.subtype_focus else int(rng.integers(n_sub))

    def emit_session(shop: str, c: int, sub: int, start: int) -> tuple[str, int]:
        sid = new_session_id()
        t = start
        n_views = int(min(cfg.session_length_max, 1 + rng.poisson(cfg.session_length_mean - 1)))
        for _ in range(n_views):
            if rng.random() < cfg.off_intent_rate:
                vc, vs = int(rng.integers(cfg.n_categories)), int(rng.integers(n_sub))
            else:
                vc, vs = c, pick_subtype(sub)
            pool = products[shop][vc][vs]
            sku = pool[int(rng.integers(len(pool)))]
            events.append(SessionEvent(t, sid, EventType.VIEW, sku=sku, shop_id=shop))
            t += int(rng.integers(5_000, 90_000))
        vocab = by_cat_vocab[shop][c]
        w = np.array([p if q.subtype in (None, sub) else 0.0 for q, p in zip(vocab, popularity[shop][c])])
        spec = vocab[int(rng.choice(len(vocab), p=w / w.sum()))]
        for plen in range(1, min(3, len(spec.query))):
            events.append(SessionEvent(t, sid, EventType.SUGGEST, query=spec.query[:plen], shop_id=shop))
            t += int(rng.integers(200, 2_000))
        events.append(SessionEvent(t, sid, EventType.SEARCH, query=spec.query, shop_id=shop))
        t += int(rng.integers(2_000, 20_000))
        n_clicks = 1 + int(rng.poisson(0.5))
        for _ in range(n_clicks):
            pool = products[shop][c][spec.subtype if spec.subtype is not None else pick_subtype(sub)]
            sku = pool[spec.product] if spec.product is not None else pool[int(rng.integers(len(pool)))]
            events.append(SessionEvent(t, sid, EventType.CLICK, sku=sku, shop_id=shop))
            t += int(rng.integers(5_000, 60_000))
        return sid, t

    for _ in range(cfg.n_sessions):
        home = int(rng.integers(2))
        shop = cfg.shops[home]
        c = int(rng.choice(cfg.n_categories, p=cat_weights))
        sub = int(rng.integers(n_sub))
        start = cfg.start_ms + int(rng.integers(0, span_ms - 86_400_000))
        sid, end = emit_session(shop, c, sub, start)
        if rng.random() < cfg.cross_shop_fraction:
            other = cfg.shops[1 - home]
            paired_start = end + int(rng.integers(600_000, 6 * 3_600_000))
            psid, _ = emit_session(other, c, sub, paired_start)
            labels.append(IntentLabel(sid, shop, categories[c], psid))
            labels.append(IntentLabel(psid, other, categories[c], None))
        else:
            labels.append(IntentLabel(sid, shop, categories[c], None))

    events.sort(key=lambda e: (e.timestamp, e.session_id))
    train_sessions = group_sessions(e for e in events if e.timestamp < boundary)
    search_logs = {shop: search_log_from_events(train_sessions, shop) for shop in cfg.shops}
    return SyntheticDataset(catalogs, events, search_logs, labels, boundary, vocabularies)


def write_labels(labels: Iterable[IntentLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# session_id\tshop_id\tcategory\tpaired_session\n")
        for lab in labels:
            fh.write(f"{lab.session_id}\t{lab.shop_id}\t{lab.category}\t{lab.paired_session or '-'}\n")


def load_labels(path: str | Path) -> list[IntentLabel]:
    path = Path(path)
    out = []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 4:
            raise ParseError(f"expected 4 tab-separated columns, got {len(cols)}", lineno, str(path))
        out.append(IntentLabel(cols[0], cols[1], cols[2], None if cols[3] == "-" else cols[3]))
    return out


def write_dataset(ds: SyntheticDataset, directory: str | Path) -> dict[str, Path]:
    """Write every part of a dataset under ``directory``; returns the file map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, Path] = {}
    for shop, records in ds.catalogs.items():
        files[f"catalog:{shop}"] = p = directory / f"{shop}.catalog.tsv"
        write_catalog(records, p)
    for shop, log in ds.search_logs.items():
        files[f"searchlog:{shop}"] = p = directory / f"{shop}.searchlog.tsv"
        write_search_log(log, p)
    files["events"] = directory / "events.tsv"
    write_events(ds.events, files["events"])
    files["labels"] = directory / "labels.tsv"
    write_labels(ds.labels, files["labels"])
    return files
