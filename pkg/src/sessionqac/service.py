"""HTTP suggestion service: synchronous retrieval plus best-effort cached conditional scores.

The request path only reads: trie lists, the session cache and the last
published score set. Model inference happens on a background worker that
publishes a complete score set per session by swapping one reference, so a
reader sees either the previous generation or the next, never a mix.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from types import MappingProxyType
from typing import Callable, Mapping, Protocol
from urllib.parse import parse_qs, parse_qsl, urlsplit

import numpy as np

from .encdec import EncDecModel, LengthNorm, score_queries
from .lm_index import TrieIndex, retrieve
from .rerank import RerankRequest, rerank
from .session import CacheConfig, SessionCache, SessionError, UnknownProduct, VectorLookup

log = logging.getLogger(__name__)

MODES = ("popularity", "similarity", "encdec_avg", "encdec_full")
UNCONDITIONED = "unconditioned"
SIMILARITY = "similarity"
CONDITIONAL = "conditional-cached"


class ServiceError(Exception):
    def __init__(self, status: int, error_class: str, message: str):
        super().__init__(message)
        self.status = status
        self.error_class = error_class
        self.message = message

    def body(self) -> dict:
        return {"error": self.error_class, "message": self.message}


def _bad_request(message: str) -> ServiceError:
    return ServiceError(400, "BadRequest", message)


@dataclass(frozen=True)
class ServiceConfig:
    n_display: int = 5
    k_multiplier: int = 5
    u_precompute: int = 100
    model_mode: str = "popularity"
    host: str = "127.0.0.1"
    port: int = 8080
    queue_depth: int = 1024
    drop_stale: bool = True
    discard_expired: bool = True
    length_norm: float = 0.7

    def __post_init__(self) -> None:
        if self.model_mode not in MODES:
            raise ValueError(f"model_mode must be one of {', '.join(MODES)}")
        if self.n_display < 1 or self.k_multiplier < 1 or self.queue_depth < 1:
            raise ValueError("n_display, k_multiplier and queue_depth must be positive")
        if self.u_precompute < self.n_display:
            raise ValueError("u_precompute must be >= n_display")

    @property
    def pool_size(self) -> int:
        return self.n_display * self.k_multiplier


# -- conditional score cache --------------------------------------------------


@dataclass(frozen=True)
class ScoreSet:
    generation: int
    scores: Mapping[str, float]
    updated_at: float
    session_version: int


class ScoreStore(Protocol):
    def get(self, key: tuple[str, str]) -> ScoreSet | None: ...
    def publish(self, key: tuple[str, str], scores: Mapping[str, float], version: int, now: float) -> ScoreSet: ...
    def discard(self, key: tuple[str, str]) -> None: ...


class ConditionalScoreCache:
    """Per-(session, shop) score sets; publishing swaps in a new frozen set."""

    def __init__(self) -> None:
        self._sets: dict[tuple[str, str], ScoreSet] = {}
        self._lock = threading.Lock()
        self.publications = 0

    def get(self, key: tuple[str, str]) -> ScoreSet | None:
        return self._sets.get(key)

    def generation(self, key: tuple[str, str]) -> int:
        current = self._sets.get(key)
        return 0 if current is None else current.generation

    def publish(self, key: tuple[str, str], scores: Mapping[str, float], version: int, now: float) -> ScoreSet:
        frozen = MappingProxyType(dict(scores))
        with self._lock:
            new = ScoreSet(self.generation(key) + 1, frozen, now, version)
            self._sets[key] = new
            self.publications += 1
        return new

    def discard(self, key: tuple[str, str]) -> None:
        with self._lock:
            self._sets.pop(key, None)

    def __len__(self) -> int:
        return len(self._sets)


# -- rescoring worker ---------------------------------------------------------


@dataclass(frozen=True)
class RescoreTask:
    session_id: str
    shop_id: str
    version: int


@dataclass
class WorkerHooks:
    """Test seams: called on the worker thread around each task."""

    before_task: Callable[[RescoreTask], None] | None = None
    after_publish: Callable[[RescoreTask, ScoreSet], None] | None = None


class RescoringWorker:
    """Consumes a bounded task queue; a full queue drops the new task."""

    def __init__(self, run_task: Callable[[RescoreTask], None], depth: int, hooks: WorkerHooks | None = None):
        self._run_task = run_task
        self.queue: queue.Queue[RescoreTask | None] = queue.Queue(maxsize=depth)
        self.hooks = hooks or WorkerHooks()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.processed = 0
        self.dropped = 0
        self.failures = 0
        self.last_done = 0.0
        self.oldest_pending: float | None = None

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive() and not self._stop.is_set()

    def start(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="rescoring-worker", daemon=True)
        self._thread.start()

    def kill(self, timeout: float = 5.0) -> None:
        """Stop consuming; queued tasks are left behind and later submissions are dropped."""
        self._stop.set()
        try:
            self.queue.put_nowait(None)
        except queue.Full:
            pass
        if self._thread is not None:
            self._thread.join(timeout)

    def submit(self, task: RescoreTask) -> bool:
        if self._stop.is_set() or self._thread is None:
            self.dropped += 1
            return False
        try:
            self.queue.put_nowait(task)
        except queue.Full:
            self.dropped += 1
            return False
        if self.oldest_pending is None:
            self.oldest_pending = time.monotonic()
        return True

    def lag(self) -> float:
        return 0.0 if self.oldest_pending is None else time.monotonic() - self.oldest_pending

    def _loop(self) -> None:
        while not self._stop.is_set():
            task = self.queue.get()
            if task is None or self._stop.is_set():
                break
            try:
                if self.hooks.before_task is not None:
                    self.hooks.before_task(task)
                if self._stop.is_set():
                    break
                self._run_task(task)
                self.processed += 1
            except Exception:  # best effort: the last published generation stays valid
                self.failures += 1
                log.exception("rescoring task failed for %s", task)
            finally:
                self.last_done = time.monotonic()
                self.oldest_pending = None if self.queue.empty() else self.oldest_pending


# -- service core -------------------------------------------------------------


@dataclass
class Suggestion:
    query: str
    score: float
    provenance: str

    def to_json(self) -> dict:
        return {"query": self.query, "score": self.score, "provenance": self.provenance}


class SuggestionService:
    def __init__(self, indexes: Mapping[str, TrieIndex], lookup: VectorLookup,
                 config: ServiceConfig = ServiceConfig(),
                 query_vectors: Mapping[str, Mapping[str, np.ndarray]] | None = None,
                 models: Mapping[str, EncDecModel] | None = None,
                 cache_config: CacheConfig = CacheConfig(),
                 clock: Callable[[], float] = time.monotonic,
                 hooks: WorkerHooks | None = None):
        self.config = config
        self._indexes = dict(indexes)
        self.index_generation = 1
        self.query_vectors = dict(query_vectors or {})
        self.models = dict(models or {})
        self.sessions = SessionCache(lookup, cache_config, clock)
        self.scores = ConditionalScoreCache()
        self.clock = clock
        self.norm = LengthNorm(config.length_norm)
        self._versions: dict[tuple[str, str], int] = {}
        self._versions_lock = threading.Lock()
        self.worker = RescoringWorker(self._rescore, config.queue_depth, hooks)
        if config.model_mode.startswith("encdec"):
            variant = config.model_mode.split("_", 1)[1]
            for shop, model in self.models.items():
                if model.variant != variant:
                    raise ValueError(f"model for shop {shop!r} is {model.variant!r}, mode needs {variant!r}")
        if config.model_mode == "similarity" and not self.query_vectors:
            raise ValueError("similarity mode needs query vectors")

    # index management

    def swap_index(self, shop_id: str, index: TrieIndex) -> None:
        indexes = dict(self._indexes)
        indexes[shop_id] = index
        self._indexes = indexes
        self.index_generation += 1

    def _index(self, shop_id: str) -> TrieIndex:
        index = self._indexes.get(shop_id)
        if index is None:
            raise ServiceError(503, "IndexUnavailable", f"no index loaded for shop {shop_id!r}")
        return index

    # write path

    def _bump(self, key: tuple[str, str]) -> int:
        with self._versions_lock:
            v = self._versions.get(key, 0) + 1
            self._versions[key] = v
            return v

    def _schedule(self, session_id: str, shop_id: str) -> None:
        if self.config.model_mode.startswith("encdec") and shop_id in self.models:
            self.worker.submit(RescoreTask(session_id, shop_id, self._bump((session_id, shop_id))))

    def handle_event(self, body: Mapping) -> dict:
        if not isinstance(body, Mapping):
            raise _bad_request("event body must be an object")
        session_id, shop_id, kind = body.get("session"), body.get("shop"), body.get("type")
        for name, value in (("session", session_id), ("shop", shop_id), ("type", kind)):
            if not isinstance(value, str) or not value:
                raise _bad_request(f"missing or empty field {name!r}")
        payload = body.get("payload", {})
        if isinstance(payload, str):
            payload = dict(parse_qsl(payload, keep_blank_values=True))
        if not isinstance(payload, Mapping):
            raise _bad_request("payload must be an object or a query string")
        kind = kind.lower()
        if kind not in ("view", "suggest", "search", "click"):
            raise _bad_request(f"unknown event type {kind!r}")
        if kind != "view":
            return {"ok": True, "stored": False}
        sku = payload.get("sku")
        if not isinstance(sku, str) or not sku:
            raise _bad_request("view event needs payload.sku")
        try:
            state = self.sessions.record_view(session_id, shop_id, sku)
        except UnknownProduct as exc:
            raise ServiceError(404, "UnknownProduct", str(exc)) from None
        self._schedule(session_id, shop_id)
        return {"ok": True, "stored": True, "n_views": state.n_views}

    def handle_transfer(self, body: Mapping) -> dict:
        if not isinstance(body, Mapping):
            raise _bad_request("transfer body must be an object")
        fields = {name: body.get(name) for name in ("session", "from_shop", "to_shop")}
        for name, value in fields.items():
            if not isinstance(value, str) or not value:
                raise _bad_request(f"missing or empty field {name!r}")
        try:
            self.sessions.transfer_session(fields["session"], fields["from_shop"], fields["to_shop"])
        except SessionError as exc:
            raise ServiceError(404, "NoSourceSession", str(exc)) from None
        except ValueError as exc:
            raise _bad_request(str(exc)) from None
        self._schedule(fields["session"], fields["to_shop"])
        return {"ok": True}

    # worker side

    def _session_input(self, session_id: str, shop_id: str):
        if self.config.model_mode == "encdec_full":
            seq = self.sessions.get_session_sequence(session_id, shop_id)
            return None if seq is None else np.stack(seq)
        return self.sessions.get_session_vector(session_id, shop_id)

    def _rescore(self, task: RescoreTask) -> None:
        key = (task.session_id, task.shop_id)
        if self.config.drop_stale and task.version < self._versions.get(key, 0):
            return
        session = self._session_input(task.session_id, task.shop_id)
        if session is None:
            if self.config.discard_expired:
                self.scores.discard(key)
            return
        model = self.models[task.shop_id]
        vocab = model.vocab
        top = [q for q in self._index(task.shop_id).top_by_prior(self.config.u_precompute)
               if not vocab.oov(q) and len(q) + 2 <= vocab.max_len]
        values = score_queries(model, session, top, self.norm) if top else []
        published = self.scores.publish(key, {q: float(s) for q, s in zip(top, values)}, task.version, self.clock())
        if self.worker.hooks.after_publish is not None:
            self.worker.hooks.after_publish(task, published)

    # read path

    def handle_suggest(self, session_id: str | None, shop_id: str, prefix: str, n: int) -> dict:
        if n < 1:
            raise _bad_request("n must be >= 1")
        pool = retrieve(self._index(shop_id), prefix, self.config.pool_size)
        mode = self.config.model_mode
        items: list[Suggestion] | None = None
        tag = UNCONDITIONED
        generation = 0
        if session_id and pool:
            if mode == "similarity":
                sv = self.sessions.get_session_vector(session_id, shop_id)
                if sv is not None:
                    ranked = rerank(RerankRequest(pool, sv, len(pool)), self.query_vectors.get(shop_id, {}))
                    items = [Suggestion(q, s, SIMILARITY) for q, s in ranked]
                    tag = SIMILARITY
            elif mode.startswith("encdec"):
                items, generation = self._cached_order(session_id, shop_id, pool)
                if items is not None:
                    tag = CONDITIONAL
        if items is None:
            items = [Suggestion(q, s, UNCONDITIONED) for q, s in pool]
        return {"provenance": tag, "generation": generation, "index_generation": self.index_generation,
                "suggestions": [it.to_json() for it in items[:n]]}

    def _cached_order(self, session_id: str, shop_id: str, pool) -> tuple[list[Suggestion] | None, int]:
        key = (session_id, shop_id)
        score_set = self.scores.get(key)
        if score_set is None:
            return None, 0
        if self.sessions.get_state(session_id, shop_id) is None:  # expired since publication
            if self.config.discard_expired:
                self.scores.discard(key)
            return None, 0
        cached = score_set.scores
        hits = sorted((i for i, (q, _) in enumerate(pool) if q in cached), key=lambda i: (-cached[pool[i][0]], i))
        if not hits:
            return None, score_set.generation
        items = [Suggestion(pool[i][0], cached[pool[i][0]], CONDITIONAL) for i in hits]
        floor = items[-1].score
        items += [Suggestion(q, floor, UNCONDITIONED) for q, _ in pool if q not in cached]
        return items, score_set.generation

    def health(self) -> dict:
        return {
            "status": "ok",
            "mode": self.config.model_mode,
            "index_generation": self.index_generation,
            "shops": sorted(self._indexes),
            "cache": self.sessions.stats() | {"score_sets": len(self.scores), "publications": self.scores.publications},
            "worker": {"alive": self.worker.alive, "queued": self.worker.queue.qsize(),
                       "processed": self.worker.processed, "dropped": self.worker.dropped,
                       "failures": self.worker.failures, "lag_seconds": round(self.worker.lag(), 6)},
        }

    def start(self) -> None:
        if self.config.model_mode.startswith("encdec"):
            self.worker.start()

    def stop(self) -> None:
        self.worker.kill()


# -- HTTP ---------------------------------------------------------------------


def _finite(obj):
    """JSON cannot carry infinities; report them as null."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def make_handler(service: SuggestionService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "sessionqac"

        def log_message(self, fmt, *args):  # route access logs through logging
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, body: dict) -> None:
            data = (json.dumps(_finite(body), separators=(",", ":")) + "\n").encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _dispatch(self, fn) -> None:
            try:
                self._send(200, fn())
            except ServiceError as exc:
                self._send(exc.status, exc.body())
            except Exception as exc:  # never let a handler thread die silently
                log.exception("unhandled error")
                self._send(500, {"error": type(exc).__name__, "message": str(exc)})

        def do_GET(self) -> None:
            url = urlsplit(self.path)
            if url.path == "/v1/health":
                self._dispatch(service.health)
            elif url.path == "/v1/suggest":
                self._dispatch(lambda: self._suggest(parse_qs(url.query, keep_blank_values=True)))
            else:
                self._send(404, {"error": "NotFound", "message": f"no route {url.path}"})

        def _suggest(self, params: dict) -> dict:
            def one(name: str, default: str | None = None) -> str | None:
                values = params.get(name)
                return values[-1] if values else default
            shop = one("shop")
            if not shop:
                raise _bad_request("missing shop")
            try:
                n = int(one("n", str(service.config.n_display)))
            except ValueError:
                raise _bad_request("n must be an integer") from None
            return service.handle_suggest(one("session"), shop, one("prefix", ""), n)

        def do_POST(self) -> None:
            url = urlsplit(self.path)
            routes = {"/v1/event": service.handle_event, "/v1/transfer": service.handle_transfer}
            handler = routes.get(url.path)
            if handler is None:
                self._drain()
                self._send(404, {"error": "NotFound", "message": f"no route {url.path}"})
                return
            raw = self._drain()
            try:
                body = json.loads(raw.decode("utf-8") or "null")
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                self._send(400, {"error": "BadRequest", "message": f"malformed JSON body: {exc}"})
                return
            self._dispatch(lambda: handler(body))

        def _drain(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length > 0 else b""

    return Handler


class SuggestServer(ThreadingHTTPServer):
    daemon_threads = True


def make_server(service: SuggestionService, host: str | None = None, port: int | None = None) -> SuggestServer:
    host = service.config.host if host is None else host
    port = service.config.port if port is None else port
    return SuggestServer((host, port), make_handler(service))


def serve_in_thread(service: SuggestionService, host: str = "127.0.0.1", port: int = 0) -> tuple[SuggestServer, threading.Thread]:
    server = make_server(service, host, port)
    thread = threading.Thread(target=server.serve_forever, name="suggest-http", daemon=True)
    thread.start()
    return server, thread
