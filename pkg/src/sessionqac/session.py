"""In-memory session cache: running session vectors, expiry and cross-shop transfer."""

from __future__ import annotations

import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np


class SessionError(KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class UnknownProduct(SessionError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    ttl: float = 1800.0  # seconds since last update
    max_sessions: int = 100_000
    eviction: str = "lru"
    window: int = 50  # viewed skus / vectors kept per session
    transfer_blend: float = 0.0  # weight of a transferred vector when in-shop views exist
    stripes: int = 64

    def __post_init__(self) -> None:
        if self.ttl <= 0:
            raise ValueError("ttl must be positive")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be positive")
        if self.eviction != "lru":
            raise ValueError("only lru eviction is supported")
        if not 0.0 <= self.transfer_blend <= 1.0:
            raise ValueError("transfer_blend must be in [0, 1]")


@dataclass(frozen=True)
class SessionState:
    session_id: str
    shop_id: str
    viewed_skus: tuple[str, ...] = ()
    pooled_vector: np.ndarray | None = None
    n_views: int = 0
    last_update: float = 0.0
    source_shop_vector: np.ndarray | None = None
    source_shop: str | None = None
    recent_vectors: tuple[np.ndarray, ...] = field(default=(), repr=False)


VectorLookup = Callable[[str, str], np.ndarray]


def lookup_from_mapping(vectors: Mapping[tuple[str, str], np.ndarray]) -> VectorLookup:
    def lookup(shop_id: str, sku: str) -> np.ndarray:
        try:
            return vectors[(shop_id, sku)]
        except KeyError:
            raise UnknownProduct(f"unknown sku {sku!r} for shop {shop_id!r}") from None
    return lookup


class SessionCache:
    """Thread-safe per-(session, shop) state with TTL expiry and LRU eviction.

    Operations on one key are serialized by a striped lock; the shared
    table is guarded by a short structural lock. States are immutable, so
    readers always see a complete update.
    """

    def __init__(self, lookup: VectorLookup, config: CacheConfig = CacheConfig(),
                 clock: Callable[[], float] = time.monotonic):
        self._lookup = lookup
        self.config = config
        self.clock = clock
        self._states: OrderedDict[tuple[str, str], SessionState] = OrderedDict()
        self._table_lock = threading.Lock()
        self._stripes = [threading.Lock() for _ in range(config.stripes)]
        self.evictions = 0
        self.expirations = 0

    def _key_lock(self, key: tuple[str, str]) -> threading.Lock:
        return self._stripes[hash(key) % len(self._stripes)]

    def _expired(self, state: SessionState, now: float) -> bool:
        return now - state.last_update > self.config.ttl

    def _read(self, key: tuple[str, str], now: float) -> SessionState | None:
        with self._table_lock:
            state = self._states.get(key)
            if state is None:
                return None
            if self._expired(state, now):
                del self._states[key]
                self.expirations += 1
                return None
            self._states.move_to_end(key)
            return state

    def _write(self, state: SessionState) -> None:
        key = (state.session_id, state.shop_id)
        with self._table_lock:
            self._states[key] = state
            self._states.move_to_end(key)
            while len(self._states) > self.config.max_sessions:
                self._states.popitem(last=False)
                self.evictions += 1

    def __len__(self) -> int:
        with self._table_lock:
            return len(self._states)

    def get_state(self, session_id: str, shop_id: str) -> SessionState | None:
        return self._read((session_id, shop_id), self.clock())

    def record_view(self, session_id: str, shop_id: str, sku: str) -> SessionState:
        vec = np.asarray(self._lookup(shop_id, sku), dtype=np.float64)
        key = (session_id, shop_id)
        with self._key_lock(key):
            now = self.clock()
            state = self._read(key, now) or SessionState(session_id, shop_id)
            n = state.n_views + 1
            pooled = vec.copy() if state.pooled_vector is None else state.pooled_vector + (vec - state.pooled_vector) / n
            w = self.config.window
            new = replace(
                state,
                viewed_skus=(state.viewed_skus + (sku,))[-w:],
                recent_vectors=(state.recent_vectors + (vec,))[-w:],
                pooled_vector=pooled,
                n_views=n,
                last_update=now,
            )
            self._write(new)
            return new

    def get_session_vector(self, session_id: str, shop_id: str) -> np.ndarray | None:
        state = self.get_state(session_id, shop_id)
        if state is None:
            return None
        if state.pooled_vector is not None:
            b = self.config.transfer_blend
            if b > 0 and state.source_shop_vector is not None:
                return (1.0 - b) * state.pooled_vector + b * state.source_shop_vector
            return state.pooled_vector
        return state.source_shop_vector

    def get_session_sequence(self, session_id: str, shop_id: str) -> list[np.ndarray] | None:
        """Recent in-shop product vectors in view order (or the transferred vector)."""
        state = self.get_state(session_id, shop_id)
        if state is None:
            return None
        if state.recent_vectors:
            return list(state.recent_vectors)
        if state.source_shop_vector is not None:
            return [state.source_shop_vector]
        return None

    def transfer_session(self, session_id: str, from_shop: str, to_shop: str) -> SessionState:
        """Inject the source shop's pooled vector into the target shop's session."""
        if from_shop == to_shop:
            raise ValueError("source and target shop must differ")
        source = self.get_state(session_id, from_shop)
        if source is None or source.pooled_vector is None:
            raise SessionError(f"session {session_id!r} has no pooled vector on shop {from_shop!r}")
        key = (session_id, to_shop)
        with self._key_lock(key):
            now = self.clock()
            target = self._read(key, now) or SessionState(session_id, to_shop)
            new = replace(target, source_shop_vector=source.pooled_vector.copy(), source_shop=from_shop,
                          last_update=now)
            self._write(new)
            return new

    def purge_expired(self) -> int:
        now = self.clock()
        with self._table_lock:
            dead = [k for k, s in self._states.items() if self._expired(s, now)]
            for k in dead:
                del self._states[k]
            self.expirations += len(dead)
        return len(dead)

    def stats(self) -> dict:
        with self._table_lock:
            return {"sessions": len(self._states), "evictions": self.evictions, "expirations": self.expirations}
