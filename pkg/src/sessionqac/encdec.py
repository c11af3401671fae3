"""Character-level encoder-decoder that scores queries given a session.

The encoder is an LSTM over product vectors: the ``avg`` variant feeds it
the single pooled session vector, the ``full`` variant the ordered
sequence of viewed products. Its final hidden and cell states initialise
a one-layer LSTM decoder over characters, followed by a dense softmax
layer. Everything is plain numpy with hand-written backpropagation.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

SOS = "<s>"
EOS = "</s>"
CHECKPOINT_HEADER = "# sessionqac-encdec v1"
PARAM_ORDER = ("enc_Wx", "enc_Wh", "enc_b", "dec_Wx", "dec_Wh", "dec_b", "out_W", "out_b")
VARIANTS = ("avg", "full")


class EncDecError(ValueError):
    pass


class OutOfVocabulary(EncDecError):
    def __init__(self, query: str, chars: Sequence[str]):
        self.query = query
        self.chars = tuple(chars)
        super().__init__(f"query {query!r} has out-of-vocabulary characters: {''.join(self.chars)!r}")


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]  # SOS, EOS, then characters
    max_len: int  # longest training query + 2 boundary tokens

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise EncDecError("vocabulary symbols must be unique")
        if self.symbols[:2] != (SOS, EOS):
            raise EncDecError("vocabulary must start with the SOS and EOS tokens")

    @classmethod
    def from_queries(cls, queries: Iterable[str]) -> "Vocabulary":
        queries = list(queries)
        chars = sorted({ch for q in queries for ch in q})
        return cls((SOS, EOS, *chars), max((len(q) for q in queries), default=0) + 2)

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def sos(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return 1

    def _lookup(self) -> dict[str, int]:
        lookup = self.__dict__.get("_index")
        if lookup is None:
            lookup = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_index", lookup)
        return lookup

    def oov(self, query: str) -> list[str]:
        lookup = self._lookup()
        return sorted({ch for ch in query if ch not in lookup or lookup[ch] < 2})

    def encode(self, query: str) -> list[int]:
        bad = self.oov(query)
        if bad:
            raise OutOfVocabulary(query, bad)
        lookup = self._lookup()
        return [lookup[ch] for ch in query]


@dataclass(frozen=True)
class LengthNorm:
    r: float = 0.7

    def __post_init__(self) -> None:
        if self.r < 0:
            raise EncDecError("length-normalization exponent must be >= 0")

    def divisor(self, length: int) -> float:
        return float(length) ** self.r


@dataclass
class EncDecModel:
    variant: str
    vocab: Vocabulary
    input_dim: int
    hidden: int
    params: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise EncDecError(f"unknown variant {self.variant!r}")
        expected = param_shapes(self.input_dim, self.hidden, self.vocab.size)
        for name in PARAM_ORDER:
            if self.params[name].shape != expected[name]:
                raise EncDecError(f"{name} has shape {self.params[name].shape}, expected {expected[name]}")

    def copy(self) -> "EncDecModel":
        return EncDecModel(self.variant, self.vocab, self.input_dim, self.hidden,
                           {k: v.copy() for k, v in self.params.items()})


def param_shapes(input_dim: int, hidden: int, vocab_size: int) -> dict[str, tuple[int, ...]]:
    g = 4 * hidden
    return {
        "enc_Wx": (input_dim, g), "enc_Wh": (hidden, g), "enc_b": (g,),
        "dec_Wx": (vocab_size, g), "dec_Wh": (hidden, g), "dec_b": (g,),
        "out_W": (hidden, vocab_size), "out_b": (vocab_size,),
    }


def init_model(vocab: Vocabulary, input_dim: int, hidden: int = 128, variant: str = "avg",
               rng_seed: int = 0, init_scale: float = 0.08, forget_bias: float = 1.0) -> EncDecModel:
    """Uniform(-scale, scale) weights, zero biases except the forget gates."""
    rng = np.random.default_rng(rng_seed)
    params = {}
    for name, shape in param_shapes(input_dim, hidden, vocab.size).items():
        if name.endswith("_b"):
            b = np.zeros(shape)
            if name != "out_b":
                b[hidden:2 * hidden] = forget_bias
            params[name] = b
        else:
            params[name] = rng.uniform(-init_scale, init_scale, size=shape)
    return EncDecModel(variant, vocab, input_dim, hidden, params)


def zero_model(vocab: Vocabulary, input_dim: int, hidden: int = 128, variant: str = "avg") -> EncDecModel:
    shapes = param_shapes(input_dim, hidden, vocab.size)
    return EncDecModel(variant, vocab, input_dim, hidden, {k: np.zeros(s) for k, s in shapes.items()})


# -- numerics ---------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class _StepCache(NamedTuple):
    x: np.ndarray | None  # dense input (encoder) or None (decoder, one-hot)
    idx: np.ndarray | None
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tc: np.ndarray
    m: np.ndarray | None


def _lstm_forward(xw: np.ndarray, h: np.ndarray, c: np.ndarray, Wh: np.ndarray, b: np.ndarray):
    H = h.shape[-1]
    z = xw + h @ Wh + b
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def _lstm_backward(dh: np.ndarray, dc: np.ndarray, cache: _StepCache, Wh: np.ndarray):
    """Gradients through one step; returns (dz, dh_prev, dc_prev)."""
    i, f, g, o, tc = cache.i, cache.f, cache.g, cache.o, cache.tc
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * cache.c_prev * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=-1)
    return dz, dz @ Wh.T, dc * f


def _as_batch_sessions(model: EncDecModel, sessions: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Stack sessions into (B, T, K) inputs and a (B, T) validity mask."""
    K = model.input_dim
    seqs = []
    for s in sessions:
        arr = np.asarray(s, dtype=np.float64)
        if model.variant == "avg":
            if arr.ndim != 1:
                raise EncDecError("the avg variant takes one pooled session vector")
            arr = arr[None, :]
        else:
            if arr.ndim != 2:
                raise EncDecError("the full variant takes a sequence of product vectors")
            if arr.shape[0] == 0:
                raise EncDecError("empty product sequence")
        if arr.shape[1] != K:
            raise EncDecError(f"session vectors have dimension {arr.shape[1]}, model expects {K}")
        seqs.append(arr)
    T = max(a.shape[0] for a in seqs)
    X = np.zeros((len(seqs), T, K))
    mask = np.zeros((len(seqs), T))
    for n, a in enumerate(seqs):
        X[n, : a.shape[0]] = a
        mask[n, : a.shape[0]] = 1.0
    return X, mask


def _encode_forward(p: dict, X: np.ndarray, mask: np.ndarray, hidden: int):
    B, T, _ = X.shape
    h = np.zeros((B, hidden))
    c = np.zeros((B, hidden))
    caches = []
    for t in range(T):
        x = X[:, t, :]
        h_new, c_new, (i, f, g, o, tc) = _lstm_forward(x @ p["enc_Wx"], h, c, p["enc_Wh"], p["enc_b"])
        m = mask[:, t:t + 1]
        caches.append(_StepCache(x, None, h, c, i, f, g, o, tc, m))
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
    return h, c, caches


def encode(model: EncDecModel, session) -> tuple[np.ndarray, np.ndarray]:
    """Decoder initial (hidden, cell) state for one session representation."""
    X, mask = _as_batch_sessions(model, [session])
    h, c, _ = _encode_forward(model.params, X, mask, model.hidden)
    return h[0], c[0]


def decoder_step(model: EncDecModel, state: tuple[np.ndarray, np.ndarray], input_index: int):
    """One decoder step: returns the next state and log-probabilities over the vocabulary."""
    if not 0 <= input_index < model.vocab.size:
        raise EncDecError(f"input index {input_index} outside vocabulary")
    p = model.params
    h, c = state
    h_new, c_new, _ = _lstm_forward(p["dec_Wx"][input_index], h, c, p["dec_Wh"], p["dec_b"])
    return (h_new, c_new), log_softmax(h_new @ p["out_W"] + p["out_b"])


# -- batched sequences ------------------------------------------------------


@dataclass
class Batch:
    X: np.ndarray  # (B, Te, K)
    enc_mask: np.ndarray  # (B, Te)
    dec_in: np.ndarray  # (B, Td) int
    dec_tgt: np.ndarray  # (B, Td) int
    dec_mask: np.ndarray  # (B, Td)


def make_batch(model: EncDecModel, sessions: Sequence, queries: Sequence[str], steps: int | None = None) -> Batch:
    X, enc_mask = _as_batch_sessions(model, sessions)
    encoded = [model.vocab.encode(q) for q in queries]
    Td = steps if steps is not None else max(len(e) for e in encoded) + 1
    B = len(queries)
    dec_in = np.full((B, Td), model.vocab.eos, dtype=np.int64)
    dec_tgt = np.full((B, Td), model.vocab.eos, dtype=np.int64)
    dec_mask = np.zeros((B, Td))
    for n, ids in enumerate(encoded):
        if len(ids) + 1 > Td:
            raise EncDecError(f"query {queries[n]!r} longer than the decoder length")
        seq_in = [model.vocab.sos, *ids]
        seq_tgt = [*ids, model.vocab.eos]
        dec_in[n, : len(seq_in)] = seq_in
        dec_tgt[n, : len(seq_tgt)] = seq_tgt
        dec_mask[n, : len(seq_tgt)] = 1.0
    return Batch(X, enc_mask, dec_in, dec_tgt, dec_mask)


def _decode_forward(p: dict, h: np.ndarray, c: np.ndarray, dec_in: np.ndarray):
    B, Td = dec_in.shape
    H = h.shape[1]
    hs = np.empty((B, Td, H))
    caches = []
    for t in range(Td):
        idx = dec_in[:, t]
        h_new, c_new, (i, f, g, o, tc) = _lstm_forward(p["dec_Wx"][idx], h, c, p["dec_Wh"], p["dec_b"])
        caches.append(_StepCache(None, idx, h, c, i, f, g, o, tc, None))
        h, c = h_new, c_new
        hs[:, t] = h
    logp = log_softmax(hs @ p["out_W"] + p["out_b"])
    return hs, logp, caches


def sequence_logprobs(model: EncDecModel, batch: Batch) -> np.ndarray:
    """(B, Td) log-probability of each target token (zero where masked)."""
    p = model.params
    h, c, _ = _encode_forward(p, batch.X, batch.enc_mask, model.hidden)
    _, logp, _ = _decode_forward(p, h, c, batch.dec_in)
    picked = np.take_along_axis(logp, batch.dec_tgt[..., None], axis=-1)[..., 0]
    return picked * batch.dec_mask


def loss_and_grads(model: EncDecModel, batch: Batch, with_grads: bool = True):
    """Mean masked cross-entropy per target token, and its parameter gradients."""
    p = model.params
    H = model.hidden
    h0, c0, enc_caches = _encode_forward(p, batch.X, batch.enc_mask, H)
    hs, logp, dec_caches = _decode_forward(p, h0, c0, batch.dec_in)
    n_tok = batch.dec_mask.sum()
    if n_tok == 0:
        raise EncDecError("batch has no target tokens")
    picked = np.take_along_axis(logp, batch.dec_tgt[..., None], axis=-1)[..., 0]
    loss = float(-(picked * batch.dec_mask).sum() / n_tok)
    if not with_grads:
        return loss, None

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, batch.dec_tgt[..., None],
                      np.take_along_axis(dlogits, batch.dec_tgt[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (batch.dec_mask / n_tok)[..., None]
    V = dlogits.shape[-1]
    grads["out_W"] = hs.reshape(-1, H).T @ dlogits.reshape(-1, V)
    grads["out_b"] = dlogits.sum(axis=(0, 1))
    dhs = dlogits @ p["out_W"].T

    dh = np.zeros_like(h0)
    dc = np.zeros_like(c0)
    for t in reversed(range(len(dec_caches))):
        cache = dec_caches[t]
        dz, dh, dc = _lstm_backward(dh + dhs[:, t], dc, cache, p["dec_Wh"])
        np.add.at(grads["dec_Wx"], cache.idx, dz)
        grads["dec_Wh"] += cache.h_prev.T @ dz
        grads["dec_b"] += dz.sum(axis=0)

    for cache in reversed(enc_caches):
        m = cache.m
        dz, dh_prev, dc_prev = _lstm_backward(m * dh, m * dc, cache, p["enc_Wh"])
        grads["enc_Wx"] += cache.x.T @ dz
        grads["enc_Wh"] += cache.h_prev.T @ dz
        grads["enc_b"] += dz.sum(axis=0)
        dh = dh_prev + (1.0 - m) * dh
        dc = dc_prev + (1.0 - m) * dc
    return loss, grads


# -- scoring ----------------------------------------------------------------


def score_queries(model: EncDecModel, session, queries: Sequence[str], norm: LengthNorm = LengthNorm()) -> np.ndarray:
    """Length-normalized log-probability of each query given one session.

    The sum runs over every character plus the end token; the divisor uses
    the raw character count.
    """
    if not queries:
        return np.zeros(0)
    for q in queries:
        if not q:
            raise EncDecError("cannot score an empty query")
    X, enc_mask = _as_batch_sessions(model, [session])
    p = model.params
    h, c, _ = _encode_forward(p, X, enc_mask, model.hidden)
    batch = make_batch(model, [session] * len(queries), queries)
    B = len(queries)
    _, logp, _ = _decode_forward(p, np.repeat(h, B, axis=0), np.repeat(c, B, axis=0), batch.dec_in)
    picked = np.take_along_axis(logp, batch.dec_tgt[..., None], axis=-1)[..., 0]
    totals = (picked * batch.dec_mask).sum(axis=1)
    return np.array([totals[n] / norm.divisor(len(q)) for n, q in enumerate(queries)])


def score_query(model: EncDecModel, session, query: str, norm: LengthNorm = LengthNorm()) -> float:
    return float(score_queries(model, session, [query], norm)[0])


def rerank_encdec(model: EncDecModel, session, candidates: Sequence[str],
                  norm: LengthNorm = LengthNorm()) -> list[tuple[str, float]]:
    """Sort candidates by conditional score; unscoreable ones go last in input order."""
    ok = [q for q in candidates if q and not model.vocab.oov(q) and len(q) + 2 <= model.vocab.max_len]
    scores = dict(zip(ok, score_queries(model, session, ok, norm))) if ok else {}
    keyed = []
    for pos, q in enumerate(candidates):
        if q in scores:
            keyed.append((0, -scores[q], pos, q))
        else:
            keyed.append((1, 0.0, pos, q))
    keyed.sort()
    return [(q, scores.get(q, -math.inf)) for _, _, _, q in keyed]


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    lr_decay: float = 0.00001  # lr_t = lr / (1 + decay * updates)
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 20
    rng_seed: int = 0
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.lr_decay < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise EncDecError("invalid training configuration")
        if not 1 <= self.patience <= self.max_epochs:
            raise EncDecError("patience must be between 1 and max_epochs")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise EncDecError("validation_fraction must be in [0, 1)")


@dataclass(frozen=True)
class TrainingPair:
    session: object  # pooled vector (avg) or (T, K) sequence (full)
    query: str
    key: str | None = None  # grouping key for the validation split, e.g. session id


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None


@dataclass
class TrainResult:
    model: EncDecModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    updates: int = 0


def split_validation(pairs: Sequence[TrainingPair], fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic split by a hash of each pair's key."""
    if fraction <= 0:
        return list(range(len(pairs))), []
    train_idx, val_idx = [], []
    cut = int(round(fraction * 10_000))
    for n, pair in enumerate(pairs):
        key = pair.key if pair.key is not None else str(n)
        (val_idx if zlib.crc32(key.encode("utf-8")) % 10_000 < cut else train_idx).append(n)
    if not train_idx:
        return list(range(len(pairs))), []
    return train_idx, val_idx


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        lr = cfg.learning_rate / (1.0 + cfg.lr_decay * self.t)
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        corr = math.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for k in PARAM_ORDER:
            g = grads[k]
            self.m[k] *= b1
            self.m[k] += (1.0 - b1) * g
            self.v[k] *= b2
            self.v[k] += (1.0 - b2) * g * g
            params[k] -= lr * corr * self.m[k] / (np.sqrt(self.v[k]) + cfg.epsilon)


def _evaluate(model: EncDecModel, pairs: Sequence[TrainingPair], idx: Sequence[int], steps: int, batch_size: int) -> float:
    total, n_tok = 0.0, 0.0
    for start in range(0, len(idx), batch_size):
        chunk = [pairs[i] for i in idx[start:start + batch_size]]
        batch = make_batch(model, [p.session for p in chunk], [p.query for p in chunk], steps)
        total -= sequence_logprobs(model, batch).sum()
        n_tok += batch.dec_mask.sum()
    return total / n_tok


def train(model: EncDecModel, dataset: Sequence[TrainingPair], config: TrainConfig = TrainConfig(),
          log=None) -> TrainResult:
    """Teacher-forced mini-batch training with Adam and early stopping.

    Returns a copy holding the parameters of the best monitored epoch
    (validation loss, or training loss when there is no validation split).
    """
    if not dataset:
        raise EncDecError("empty training dataset")
    if model.vocab.size < 3:
        raise EncDecError("degenerate vocabulary: need at least one character besides SOS/EOS")
    for pair in dataset:
        model.vocab.encode(pair.query)
    steps = model.vocab.max_len - 1
    model = model.copy()
    train_idx, val_idx = split_validation(dataset, config.validation_fraction)
    rng = np.random.default_rng(config.rng_seed)
    opt = Adam(model.params, config)
    result = TrainResult(model.copy())
    best = math.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_idx))
        total, n_tok = 0.0, 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = [dataset[train_idx[j]] for j in order[start:start + config.batch_size]]
            batch = make_batch(model, [p.session for p in chunk], [p.query for p in chunk], steps)
            loss, grads = loss_and_grads(model, batch)
            k = batch.dec_mask.sum()
            total += loss * k
            n_tok += k
            opt.step(model.params, grads)
        train_loss = total / n_tok
        val_loss = _evaluate(model, dataset, val_idx, steps, config.batch_size) if val_idx else None
        result.history.append(EpochRecord(epoch, train_loss, val_loss))
        if log is not None:
            log(epoch, train_loss, val_loss)
        monitored = val_loss if val_loss is not None else train_loss
        if monitored < best:
            best = monitored
            stale = 0
            result.model = model.copy()
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    result.updates = opt.t
    return result


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: EncDecModel, path: str | Path) -> None:
    meta = {
        "variant": model.variant,
        "input_dim": model.input_dim,
        "hidden": model.hidden,
        "max_len": model.vocab.max_len,
        "symbols": list(model.vocab.symbols),
        "params": [[name, list(model.params[name].shape)] for name in PARAM_ORDER],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write(json.dumps(meta, ensure_ascii=False) + "\n")
        for name in PARAM_ORDER:
            fh.write(name + "\t" + " ".join(float.hex(float(x)) for x in model.params[name].ravel()) + "\n")


def load_checkpoint(path: str | Path) -> EncDecModel:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise EncDecError(f"{path}: expected header {CHECKPOINT_HEADER!r}")
        meta = json.loads(fh.readline())
        shapes = {name: tuple(shape) for name, shape in meta["params"]}
        params = {}
        for line in fh:
            name, _, data = line.rstrip("\n").partition("\t")
            flat = np.array([float.fromhex(x) for x in data.split()], dtype=np.float64) if data else np.zeros(0)
            params[name] = flat.reshape(shapes[name])
    vocab = Vocabulary(tuple(meta["symbols"]), meta["max_len"])
    return EncDecModel(meta["variant"], vocab, meta["input_dim"], meta["hidden"], params)
