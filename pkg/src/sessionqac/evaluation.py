"""Offline evaluation: temporal split, MRR@k over seed lengths, dispersion and cross-shop runs."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .ingest import EventType, SearchLogEntry, SessionEvent, normalize_query, search_log_from_events
from .models import Context, EMPTY_CONTEXT, Pipeline
from .vectors import ProductVectors


class EvalError(ValueError):
    pass


# -- metric -----------------------------------------------------------------


def reciprocal_rank(ranked: Sequence[str], target: str, k: int) -> float:
    for pos, q in enumerate(ranked[:k], start=1):
        if q == target:
            return 1.0 / pos
    return 0.0


def mrr_at_k(ranked_lists: Sequence[Sequence[str]], targets: Sequence[str], k: int) -> float:
    if len(ranked_lists) != len(targets):
        raise EvalError("ranked_lists and targets must be aligned")
    if not targets:
        raise EvalError("mrr of an empty query set is undefined")
    if k < 1:
        raise EvalError("k must be >= 1")
    return sum(reciprocal_rank(r, t, k) for r, t in zip(ranked_lists, targets)) / len(targets)


# -- cases and splits -------------------------------------------------------


@dataclass(frozen=True)
class EvalCase:
    session_id: str
    shop_id: str
    timestamp: int
    context_skus: tuple[str, ...]
    target: str
    seed: str = ""

    def __post_init__(self) -> None:
        if not self.target.startswith(self.seed):
            raise EvalError(f"seed {self.seed!r} is not a prefix of {self.target!r}")

    def with_seed_length(self, n: int) -> "EvalCase":
        return replace(self, seed=self.target[:n])


@dataclass
class TrainSet:
    sessions: dict[str, list[SessionEvent]]
    search_logs: dict[str, list[SearchLogEntry]]
    boundary: int


def _shops(sessions: Mapping[str, Sequence[SessionEvent]]) -> list[str]:
    return sorted({ev.shop_id for evs in sessions.values() for ev in evs if ev.shop_id is not None})


def search_cases(sessions: Mapping[str, Sequence[SessionEvent]], keep: Callable[[SessionEvent], bool]) -> list[EvalCase]:
    """One case per kept search event; context is the same-shop views before it."""
    cases = []
    for sid, evs in sessions.items():
        views: list[tuple[str | None, str]] = []
        for ev in evs:
            if ev.event_type is EventType.VIEW:
                views.append((ev.shop_id, ev.sku))
            elif ev.event_type is EventType.SEARCH and keep(ev):
                ctx = tuple(sku for shop, sku in views if shop == ev.shop_id)
                cases.append(EvalCase(sid, ev.shop_id or "", ev.timestamp, ctx, ev.query))
    cases.sort(key=lambda c: (c.timestamp, c.session_id))
    return cases


def temporal_split(sessions: Mapping[str, Sequence[SessionEvent]], boundary: int,
                   search_logs: Mapping[str, Sequence[SearchLogEntry]] | None = None) -> tuple[TrainSet, list[EvalCase]]:
    """Train on events strictly before ``boundary``; evaluate searches at or after it.

    A session straddling the boundary contributes each search to the side
    its own timestamp falls on; the views preceding a test search stay in
    its context even when they happened before the boundary. Priors and
    query vectors must come from the training side only, so supplied
    search logs are trusted to be pre-boundary history and are otherwise
    rebuilt from the training events.
    """
    train_sessions: dict[str, list[SessionEvent]] = {}
    for sid, evs in sessions.items():
        before = [ev for ev in evs if ev.timestamp < boundary]
        if before:
            train_sessions[sid] = before
    cases = search_cases(sessions, lambda ev: ev.timestamp >= boundary)
    has_train_search = any(ev.event_type is EventType.SEARCH for evs in train_sessions.values() for ev in evs)
    if not train_sessions or (not has_train_search and not search_logs):
        raise EvalError("temporal split leaves the training side empty")
    if not cases:
        raise EvalError("temporal split leaves the test side empty")
    if search_logs is None:
        logs = {shop: search_log_from_events(train_sessions, shop) for shop in _shops(train_sessions)}
    else:
        logs = {shop: list(log) for shop, log in search_logs.items()}
    return TrainSet(train_sessions, logs, boundary), cases


def window_subset(train: TrainSet, fraction: float) -> TrainSet:
    """Keep the most recent ``fraction`` of the training window (by session start)."""
    if not 0.0 < fraction <= 1.0:
        raise EvalError("fraction must be in (0, 1]")
    starts = {sid: evs[0].timestamp for sid, evs in train.sessions.items()}
    first = min(starts.values())
    cutoff = train.boundary - fraction * (train.boundary - first)
    kept = {sid: evs for sid, evs in train.sessions.items() if starts[sid] >= cutoff}
    logs = {shop: search_log_from_events(kept, shop) for shop in train.search_logs}
    return TrainSet(kept, logs, train.boundary)


def context_for(skus: Sequence[str], shop_id: str, products: ProductVectors) -> Context:
    vecs, cats = [], []
    for sku in skus:
        vecs.append(products.get(shop_id, sku))
        cats.append(products.category(shop_id, sku))
    return Context(tuple(vecs), tuple(cats), shop_id)


# -- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    model: str
    seed: str
    direction: str
    mean: float
    sd: float
    runs: int
    sample_size: int
    per_run: tuple[float, ...] = field(default=(), compare=False)


@dataclass
class EvalReport:
    k: int
    rows: list[ReportRow] = field(default_factory=list)

    def get(self, model: str, seed: str | int = "1", direction: str = "-") -> ReportRow:
        for row in self.rows:
            if row.model == model and row.seed == str(seed) and row.direction == direction:
                return row
        raise KeyError((model, str(seed), direction))

    def mean(self, model: str, seed: str | int = "1", direction: str = "-") -> float:
        return self.get(model, seed, direction).mean

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)


def _sd(values: Sequence[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def format_table(report: EvalReport) -> str:
    head = f"{'model':<24} {'seed':>4} {'direction':<16} {'MRR@' + str(report.k):>8} {'(SD)':>10} {'runs':>4} {'n':>6}"
    lines = [head, "-" * len(head)]
    for r in report.rows:
        lines.append(f"{r.model:<24} {r.seed:>4} {r.direction:<16} {r.mean:>8.4f} {'(' + format(r.sd, '.4f') + ')':>10} "
                     f"{r.runs:>4} {r.sample_size:>6}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, tsv_path: str | Path, table_path: str | Path | None = None) -> None:
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# sessionqac-report v1 k={report.k}\n")
        fh.write("model\tseed\tdirection\tmean\tsd\truns\tsample_size\tper_run\n")
        for r in report.rows:
            per_run = ",".join(f"{x:.6f}" for x in r.per_run)
            fh.write(f"{r.model}\t{r.seed}\t{r.direction}\t{r.mean:.6f}\t{r.sd:.6f}\t{r.runs}\t{r.sample_size}\t{per_run}\n")
    if table_path is not None:
        Path(table_path).write_text(format_table(report), encoding="utf-8")


def read_report(path: str | Path) -> EvalReport:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    k = int(lines[0].rsplit("k=", 1)[1])
    rows = []
    for line in lines[2:]:
        c = line.split("\t")
        per_run = tuple(float(x) for x in c[7].split(",")) if c[7] else ()
        rows.append(ReportRow(c[0], c[1], c[2], float(c[3]), float(c[4]), int(c[5]), int(c[6]), per_run))
    return EvalReport(k, rows)


# -- benchmarks -------------------------------------------------------------


def _sample_runs(n_cases: int, runs: int, sample_per_run: int, rng_seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(runs):
        if sample_per_run >= n_cases:
            out.append(np.arange(n_cases))
        else:
            out.append(np.sort(rng.choice(n_cases, size=sample_per_run, replace=False)))
    return out


def run_benchmark(models: Mapping[str, Pipeline], cases: Sequence[EvalCase], k: int = 5, runs: int = 10,
                  sample_per_run: int = 7500, rng_seed: int = 0, seed_lengths: Sequence[int] | None = (0, 1),
                  contexts: Callable[[EvalCase], Context] | None = None, direction: str = "-") -> EvalReport:
    """Average MRR@k over ``runs`` uniform samples of the cases.

    Every model sees the same sample in a run. ``seed_lengths=None`` keeps
    each case's own seed (reported as seed ``case``). When the sample size
    reaches the case count, every run uses the whole set.
    """
    if not cases:
        raise EvalError("no evaluation cases")
    if runs < 1 or sample_per_run < 1 or k < 1:
        raise EvalError("runs, sample_per_run and k must be positive")
    samples = _sample_runs(len(cases), runs, sample_per_run, rng_seed)
    needed = sorted(set(np.concatenate(samples).tolist()))
    ctx_cache: dict[int, Context] = {}

    def ctx(i: int) -> Context:
        if i not in ctx_cache:
            ctx_cache[i] = contexts(cases[i]) if contexts is not None else EMPTY_CONTEXT
        return ctx_cache[i]

    report = EvalReport(k)
    seeds: list[int | None] = list(seed_lengths) if seed_lengths is not None else [None]
    for name, model in models.items():
        for n in seeds:
            rr = np.zeros(len(cases))
            for i in needed:
                case = cases[i] if n is None else cases[i].with_seed_length(n)
                rr[i] = reciprocal_rank(model.suggest(ctx(i), case.seed, k), case.target, k)
            per_run = tuple(float(rr[s].mean()) for s in samples)
            report.rows.append(ReportRow(name, "case" if n is None else str(n), direction,
                                         float(np.mean(per_run)), _sd(per_run), runs, len(samples[0]), per_run))
    return report


# -- dispersion -------------------------------------------------------------


@dataclass(frozen=True)
class DispersionRecord:
    query: str
    dispersion: float
    cls: str  # "high" or "low"


def dispersion_split(search_log: Iterable[SearchLogEntry], product_vectors: Mapping[str, np.ndarray]) -> list[DispersionRecord]:
    """Sum of distances from the clicked products to their centroid, split at the median.

    Each distinct clicked product counts once. Queries above the median are
    ``high``, the rest ``low``.
    """
    clicked: dict[str, set[str]] = {}
    for e in search_log:
        s = clicked.setdefault(e.query, set())
        s.update(sku for sku, _ in e.clicked_skus)
    values: dict[str, float] = {}
    for q in sorted(clicked):
        skus = sorted(clicked[q])
        if not skus:
            continue
        missing = [s for s in skus if s not in product_vectors]
        if missing:
            raise EvalError(f"no product vector for sku {missing[0]!r} (query {q!r})")
        V = np.stack([np.asarray(product_vectors[s], dtype=np.float64) for s in skus])
        values[q] = float(np.linalg.norm(V - V.mean(axis=0), axis=1).sum())
    if not values:
        raise EvalError("no query has a clicked product")
    median = float(np.median(list(values.values())))
    return [DispersionRecord(q, d, "high" if d > median else "low") for q, d in values.items()]


def dispersion_benchmark(model: Pipeline, cases: Sequence[EvalCase], records: Sequence[DispersionRecord],
                         contexts: Callable[[EvalCase], Context], k: int = 5, runs: int = 5,
                         sample_per_run: int = 7500, rng_seed: int = 0, seed_length: int = 1,
                         name: str = "Similarity") -> EvalReport:
    """MRR of one model on test cases grouped by their target's dispersion class."""
    cls = {r.query: r.cls for r in records}
    report = EvalReport(k)
    for label in ("high", "low"):
        subset = [c for c in cases if cls.get(c.target) == label]
        if not subset:
            raise EvalError(f"no test case targets a {label}-dispersion query")
        report.extend(run_benchmark({name: model}, subset, k, runs, sample_per_run, rng_seed, (seed_length,),
                                    contexts, direction=f"dispersion={label}"))
    return report


# -- cross-shop -------------------------------------------------------------


@dataclass(frozen=True)
class PairedCase:
    source_shop: str
    source_skus: tuple[str, ...]
    case: EvalCase  # search on the target shop, with its own in-shop context


def paired_cases(sessions: Mapping[str, Sequence[SessionEvent]], pairs: Iterable[tuple[str, str]],
                 boundary: int) -> list[PairedCase]:
    """Cross-shop cases: views on a source session, then a viewed-and-searched target session.

    Only target searches at or after ``boundary`` count; both sides need at
    least one product view before the target search.
    """
    out = []
    for source_sid, target_sid in pairs:
        src = sessions.get(source_sid, [])
        tgt = sessions.get(target_sid, [])
        cases = [c for c in search_cases({target_sid: list(tgt)}, lambda ev: ev.timestamp >= boundary) if c.context_skus]
        if not cases or not src:
            continue
        case = cases[0]
        src_views = [ev for ev in src if ev.event_type is EventType.VIEW and ev.timestamp < case.timestamp]
        shops = {ev.shop_id for ev in src_views}
        if not src_views or len(shops) != 1 or case.shop_id in shops:
            continue
        out.append(PairedCase(shops.pop() or "", tuple(ev.sku for ev in src_views), case))
    out.sort(key=lambda p: (p.case.timestamp, p.case.session_id))
    return out


CROSS_CONDITIONS = ("Popularity", "Cross-shop Similarity", "Cross-shop Enc-Dec", "Within-shop Similarity")


def cross_shop_benchmark(pairs: Sequence[PairedCase], models_by_shop: Mapping[str, Mapping[str, Pipeline]],
                         products: ProductVectors, k: int = 5, seed_length: int = 1) -> EvalReport:
    """Four conditions per transfer direction, every paired case evaluated once.

    ``models_by_shop[target]`` must provide ``popularity`` and ``similarity``
    pipelines and may provide ``encdec_avg``; the cross-shop conditions feed
    the target shop's models the source shop's context.
    """
    if not pairs:
        raise EvalError("no paired cross-shop sessions")
    report = EvalReport(k)
    directions = sorted({(p.source_shop, p.case.shop_id) for p in pairs})
    for src, tgt in directions:
        group = [p for p in pairs if (p.source_shop, p.case.shop_id) == (src, tgt)]
        models = models_by_shop[tgt]
        label = f"{src}->{tgt}"
        conditions: list[tuple[str, Pipeline, bool]] = [
            ("Popularity", models["popularity"], False),
            ("Cross-shop Similarity", models["similarity"], True),
        ]
        if "encdec_avg" in models:
            conditions.append(("Cross-shop Enc-Dec", models["encdec_avg"], True))
        conditions.append(("Within-shop Similarity", models["similarity"], False))
        for name, model, transferred in conditions:
            rrs = []
            for p in group:
                case = p.case.with_seed_length(seed_length)
                if name == "Popularity":
                    ctx = EMPTY_CONTEXT
                elif transferred:
                    ctx = context_for(p.source_skus, p.source_shop, products)
                else:
                    ctx = context_for(case.context_skus, case.shop_id, products)
                rrs.append(reciprocal_rank(model.suggest(ctx, case.seed, k), case.target, k))
            mean = float(np.mean(rrs))
            report.rows.append(ReportRow(name, str(seed_length), label, mean, 0.0, 1, len(group), (mean,)))
    return report


# -- external judgments -----------------------------------------------------


def load_judgments(path: str | Path) -> list[EvalCase]:
    """Relevance judgments as cases: ``shop<TAB>sku,sku,...<TAB>seed<TAB>chosen_query``.

    Stimuli left blank (no relevant completion) are skipped.
    """
    cases = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise EvalError(f"{path}:{lineno}: expected 4 tab-separated columns")
            shop, skus, seed, chosen = cols
            chosen = normalize_query(chosen)
            if not chosen:
                continue
            cases.append(EvalCase(f"judgment-{lineno}", shop, lineno, tuple(filter(None, skus.split(","))),
                                  chosen, seed.lower()))
    return cases
