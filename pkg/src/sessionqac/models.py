"""Suggestion pipelines sharing one interface: ``suggest(context, seed, k)``.

Every personalized pipeline retrieves ``k * k_multiplier`` completions from
the unconditioned index and re-ranks them; without session context it
returns the unconditioned order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .encdec import EncDecModel, LengthNorm, rerank_encdec
from .lm_index import MarkovModel, TrieIndex, markov_score, retrieve, session_bucket
from .rerank import RerankRequest, rerank
from .vectors import pool_session


@dataclass(frozen=True)
class Context:
    """What a pipeline may know about the shopper: viewed products in order."""

    vectors: tuple[np.ndarray, ...] = ()
    categories: tuple[str | None, ...] = ()
    shop_id: str | None = None

    @property
    def empty(self) -> bool:
        return not self.vectors


EMPTY_CONTEXT = Context()


class Pipeline(Protocol):
    def suggest(self, context: Context, seed: str, k: int) -> list[str]: ...


@dataclass
class PopularityPipeline:
    index: TrieIndex

    def suggest(self, context: Context, seed: str, k: int) -> list[str]:
        return [q for q, _ in retrieve(self.index, seed, k)]


@dataclass
class MarkovPipeline:
    index: TrieIndex
    markov: MarkovModel
    k_multiplier: int = 5

    def suggest(self, context: Context, seed: str, k: int) -> list[str]:
        pool = [q for q, _ in retrieve(self.index, seed, k * self.k_multiplier)]
        bucket = session_bucket(context.categories)
        scored = sorted(range(len(pool)), key=lambda i: (-markov_score(self.markov, bucket, pool[i]).logprob, i))
        return [pool[i] for i in scored[:k]]


@dataclass
class SimilarityPipeline:
    index: TrieIndex
    query_vectors: dict[str, np.ndarray]
    k_multiplier: int = 5
    blend: float = 0.0

    def session_vector(self, context: Context) -> np.ndarray | None:
        return None if context.empty else pool_session(list(context.vectors), "average")

    def suggest(self, context: Context, seed: str, k: int) -> list[str]:
        pool = retrieve(self.index, seed, k * self.k_multiplier)
        req = RerankRequest(pool, self.session_vector(context), k, self.blend)
        return [q for q, _ in rerank(req, self.query_vectors)]


@dataclass
class EncDecPipeline:
    index: TrieIndex
    model: EncDecModel
    norm: LengthNorm = LengthNorm()
    k_multiplier: int = 5

    def session_input(self, context: Context):
        if context.empty:
            return None
        if self.model.variant == "avg":
            return pool_session(list(context.vectors), "average")
        return np.stack(context.vectors)

    def suggest(self, context: Context, seed: str, k: int) -> list[str]:
        pool = [q for q, _ in retrieve(self.index, seed, k * self.k_multiplier)]
        session = self.session_input(context)
        if session is None or not pool:
            return pool[:k]
        return [q for q, _ in rerank_encdec(self.model, session, pool, self.norm)[:k]]


@dataclass
class ShopRouter:
    """Dispatches to the pipeline of the context's shop."""

    by_shop: dict[str, Pipeline]

    def suggest(self, context: Context, seed: str, k: int) -> list[str]:
        try:
            pipeline = self.by_shop[context.shop_id]
        except KeyError:
            raise KeyError(f"no pipeline for shop {context.shop_id!r}") from None
        return pipeline.suggest(context, seed, k)


def context_from(vectors: Sequence[np.ndarray], categories: Sequence[str | None] = (),
                 shop_id: str | None = None) -> Context:
    return Context(tuple(np.asarray(v, dtype=np.float64) for v in vectors), tuple(categories), shop_id)
