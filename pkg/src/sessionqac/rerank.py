"""Cosine re-ranking of retrieved completions against a session vector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

# reported similarity for candidates without a query vector: the cosine floor
MISSING_SIMILARITY = -1.0


class RerankError(ValueError):
    pass


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise RerankError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class RerankRequest:
    candidates: Sequence[tuple[str, float]]  # unconditioned order
    session_vector: np.ndarray | None
    n_final: int
    blend: float = 0.0  # weight on the normalized unconditioned score; 0 = pure similarity


def rerank(request: RerankRequest, query_vectors: Mapping[str, np.ndarray]) -> list[tuple[str, float]]:
    """Order candidates by cosine to the session vector.

    Candidates without a query vector keep their unconditioned order after
    all vectorized ones and report :data:`MISSING_SIMILARITY`. Ties keep the
    unconditioned order. A missing or all-zero session vector bypasses the
    re-ranking and returns the unconditioned list unchanged.
    """
    cands = list(request.candidates)
    if not cands or request.n_final < 1:
        return []
    sv = request.session_vector
    if sv is None or not np.any(np.asarray(sv)):
        return cands[: request.n_final]
    sv = np.asarray(sv, dtype=np.float64)
    if not np.all(np.isfinite(sv)):
        raise RerankError("session vector has non-finite entries")
    top_score = max((s for _, s in cands), default=0.0) or 1.0
    keyed = []
    for pos, (query, score) in enumerate(cands):
        vec = query_vectors.get(query)
        if vec is None or not np.any(vec):
            keyed.append((1, 0.0, pos, query, MISSING_SIMILARITY))
            continue
        sim = cosine(vec, sv)
        value = (1.0 - request.blend) * sim + request.blend * (score / top_score)
        keyed.append((0, -value, pos, query, value))
    keyed.sort()
    return [(query, value) for _, _, _, query, value in keyed[: request.n_final]]
