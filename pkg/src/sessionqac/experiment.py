"""End-to-end experiment assembly: per-shop models from a training split, then benchmarks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .encdec import (EncDecModel, LengthNorm, TrainConfig, TrainingPair, TrainResult, Vocabulary, init_model,
                     train as train_encdec)
from .evaluation import (EvalCase, EvalReport, PairedCase, ReportRow, TrainSet, context_for, cross_shop_benchmark,
                         dispersion_benchmark, dispersion_split, paired_cases, run_benchmark, temporal_split,
                         window_subset)
from .ingest import EventType, IntentLabel, SessionEvent, SyntheticDataset, group_sessions
from .lm_index import ErrorModel, MarkovModel, TrieIndex, build_trie, estimate_priors, fit_markov, session_bucket
from .models import EncDecPipeline, MarkovPipeline, Pipeline, PopularityPipeline, ShopRouter, SimilarityPipeline
from .vectors import ProductVectors, build_query_vectors, pool_session, reduce_catalogs

MODEL_NAMES = {
    "popularity": "Popularity",
    "markov": "Markov",
    "similarity": "Similarity",
    "encdec_avg": "EncDec-Avg",
    "encdec_full": "EncDec-Full",
}


@dataclass(frozen=True)
class ExperimentConfig:
    k: int = 5
    runs: int = 5
    sample_per_run: int = 7500
    rng_seed: int = 0
    seed_lengths: tuple[int, ...] = (0, 1)
    k_multiplier: int = 5
    max_fanout: int = 25
    pca_k: int | None = None
    hidden: int = 128
    length_norm: float = 0.7
    markov_alpha: float = 1.0
    models: tuple[str, ...] = ("popularity", "markov", "similarity", "encdec_avg")
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        unknown = [m for m in self.models if m not in MODEL_NAMES]
        if unknown:
            raise ValueError(f"unknown model(s): {', '.join(unknown)}")


@dataclass
class ShopModels:
    shop_id: str
    index: TrieIndex
    query_vectors: dict[str, np.ndarray]
    markov: MarkovModel
    encdec: dict[str, EncDecModel] = field(default_factory=dict)

    def pipelines(self, cfg: ExperimentConfig) -> dict[str, Pipeline]:
        out: dict[str, Pipeline] = {
            "popularity": PopularityPipeline(self.index),
            "markov": MarkovPipeline(self.index, self.markov, cfg.k_multiplier),
            "similarity": SimilarityPipeline(self.index, self.query_vectors, cfg.k_multiplier),
        }
        for variant, model in self.encdec.items():
            out[f"encdec_{variant}"] = EncDecPipeline(self.index, model, LengthNorm(cfg.length_norm), cfg.k_multiplier)
        return out


def view_contexts(sessions: Mapping[str, Sequence[SessionEvent]], shop_id: str) -> Iterable[tuple[str, list[str], str]]:
    """(session id, same-shop views before the search, query) for every search on ``shop_id``."""
    for sid, evs in sessions.items():
        views: list[str] = []
        for ev in evs:
            if ev.shop_id != shop_id:
                continue
            if ev.event_type is EventType.VIEW:
                views.append(ev.sku)
            elif ev.event_type is EventType.SEARCH:
                yield sid, list(views), ev.query


def training_pairs(sessions: Mapping[str, Sequence[SessionEvent]], shop_id: str, products: ProductVectors,
                   variant: str) -> list[TrainingPair]:
    pairs = []
    for sid, skus, query in view_contexts(sessions, shop_id):
        if not skus:
            continue
        vecs = [products.get(shop_id, s) for s in skus]
        pairs.append(TrainingPair(pool_session(vecs, "average" if variant == "avg" else "sequence"), query, sid))
    return pairs


def fit_shop(train: TrainSet, shop_id: str, products: ProductVectors, cfg: ExperimentConfig,
             log: Callable[[str], None] | None = None) -> ShopModels:
    log = log or (lambda msg: None)
    log_entries = train.search_logs[shop_id]
    index = build_trie(estimate_priors(log_entries), ErrorModel(), cfg.max_fanout)
    qv = build_query_vectors(log_entries, products.for_shop(shop_id))
    markov_pairs = [(session_bucket([products.category(shop_id, s) for s in skus]) or "*", q)
                    for _, skus, q in view_contexts(train.sessions, shop_id)]
    markov = fit_markov(markov_pairs, cfg.markov_alpha)
    shop = ShopModels(shop_id, index, qv, markov)
    for name in cfg.models:
        if not name.startswith("encdec_"):
            continue
        variant = name.split("_", 1)[1]
        shop.encdec[variant] = fit_encdec(train, shop_id, products, variant, cfg, log).model
    return shop


def fit_encdec(train: TrainSet, shop_id: str, products: ProductVectors, variant: str, cfg: ExperimentConfig,
               log: Callable[[str], None] | None = None) -> TrainResult:
    pairs = training_pairs(train.sessions, shop_id, products, variant)
    if not pairs:
        raise ValueError(f"no training pairs for shop {shop_id!r}")
    vocab = Vocabulary.from_queries(p.query for p in pairs)
    dim = len(next(iter(products.for_shop(shop_id).values())))
    model = init_model(vocab, dim, cfg.hidden, variant, cfg.train.rng_seed)
    t0 = time.perf_counter()
    result = train_encdec(model, pairs, cfg.train)
    if log is not None:
        log(f"encdec {variant} {shop_id}: {len(pairs)} pairs, best epoch {result.best_epoch} of "
            f"{len(result.history)}, {time.perf_counter() - t0:.1f}s")
    return result


def eval_cases(cases: Sequence[EvalCase], require_context: bool = True) -> list[EvalCase]:
    return [c for c in cases if c.context_skus or not require_context]


@dataclass
class WithinShopResult:
    report: EvalReport
    shops: dict[str, ShopModels]
    cases: list[EvalCase]
    products: ProductVectors
    train: TrainSet


def build_products(ds_catalogs, pca_k: int | None) -> ProductVectors:
    _, products = reduce_catalogs(ds_catalogs, pca_k)
    return products


def fit_all(sessions: Mapping[str, Sequence[SessionEvent]], boundary: int, products: ProductVectors,
            cfg: ExperimentConfig, search_logs=None, log=None) -> tuple[TrainSet, list[EvalCase], dict[str, ShopModels]]:
    train, cases = temporal_split(sessions, boundary, search_logs)
    shops = {shop: fit_shop(train, shop, products, cfg, log) for shop in sorted(train.search_logs)}
    return train, eval_cases(cases), shops


def benchmark(shops: Mapping[str, ShopModels], cases: Sequence[EvalCase], products: ProductVectors,
              cfg: ExperimentConfig) -> EvalReport:
    per_shop = {shop: m.pipelines(cfg) for shop, m in shops.items()}
    models = {MODEL_NAMES[name]: ShopRouter({shop: p[name] for shop, p in per_shop.items()})
              for name in cfg.models}
    cases = [c for c in cases if c.shop_id in shops]
    return run_benchmark(models, cases, cfg.k, cfg.runs, cfg.sample_per_run, cfg.rng_seed, cfg.seed_lengths,
                         lambda c: context_for(c.context_skus, c.shop_id, products))


def run_within_shop(ds: SyntheticDataset, cfg: ExperimentConfig, log=None) -> WithinShopResult:
    products = build_products(ds.catalogs, cfg.pca_k)
    train, cases, shops = fit_all(group_sessions(ds.events), ds.boundary, products, cfg, ds.search_logs, log)
    return WithinShopResult(benchmark(shops, cases, products, cfg), shops, cases, products, train)


def run_dispersion(result: WithinShopResult, cfg: ExperimentConfig, seed_length: int = 1) -> EvalReport:
    """Similarity MRR on test cases split by the dispersion class of their target."""
    records = []
    for shop, models in result.shops.items():
        records.extend(dispersion_split(result.train.search_logs[shop], result.products.for_shop(shop)))
    cls: dict[str, set[str]] = {}
    for r in records:
        cls.setdefault(r.query, set()).add(r.cls)
    # a query string shared by both shops keeps a class only when both agree
    merged = [r for r in records if len(cls[r.query]) == 1]
    router = ShopRouter({shop: m.pipelines(cfg)["similarity"] for shop, m in result.shops.items()})
    return dispersion_benchmark(router, result.cases, merged,
                                lambda c: context_for(c.context_skus, c.shop_id, result.products),
                                cfg.k, cfg.runs, cfg.sample_per_run, cfg.rng_seed, seed_length)


def label_pairs(labels: Iterable[IntentLabel]) -> list[tuple[str, str]]:
    return [(lab.session_id, lab.paired_session) for lab in labels if lab.paired_session]


def run_cross_shop(ds: SyntheticDataset, cfg: ExperimentConfig, log=None) -> tuple[EvalReport, list[PairedCase]]:
    """Joint vector space across shops; models trained per shop; four transfer conditions."""
    products = build_products(ds.catalogs, cfg.pca_k)
    sessions = group_sessions(ds.events)
    train, _cases, shops = fit_all(sessions, ds.boundary, products, cfg, ds.search_logs, log)
    pairs = paired_cases(sessions, label_pairs(ds.labels), ds.boundary)
    models_by_shop = {shop: m.pipelines(cfg) for shop, m in shops.items()}
    return cross_shop_benchmark(pairs, models_by_shop, products, cfg.k, 1), pairs


def run_window_sweep(train: TrainSet, cases: Sequence[EvalCase], products: ProductVectors, cfg: ExperimentConfig,
                     fractions: Sequence[float] = (1 / 3, 2 / 3, 1.0), log=None) -> EvalReport:
    """Refit every model on the most recent fraction of the training window; same test cases."""
    report = EvalReport(cfg.k)
    for fraction in fractions:
        sub = window_subset(train, fraction)
        shops = {shop: fit_shop(sub, shop, products, cfg, log) for shop in sorted(sub.search_logs)
                 if sub.search_logs[shop]}
        part = benchmark(shops, cases, products, cfg)
        label = f"window={fraction:.3f}"
        report.rows.extend(ReportRow(r.model, r.seed, label, r.mean, r.sd, r.runs, r.sample_size, r.per_run)
                           for r in part.rows)
    return report
