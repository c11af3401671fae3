import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sessionqac.ingest import SearchLogEntry
from sessionqac.lm_index import (
    CandidateEntry,
    ErrorModel,
    IndexBuildError,
    build_trie,
    estimate_priors,
    fit_markov,
    load_index,
    load_markov,
    markov_score,
    qwerty_adjacency,
    retrieve,
    save_index,
    save_markov,
    session_bucket,
)

CONFUSIONS = {"s": {"z": 1.0, "a": 1.0}, "h": {"j": 1.0}, "o": {"i": 3.0, "p": 1.0}}


def channel_oracle(typed: str, query: str, mass: float) -> float:
    """Independent P(t|q) for the exact-prefix plus one-substitution model."""
    if len(typed) > len(query):
        return 0.0
    if not typed:
        return 1.0
    true = query[: len(typed)]
    if typed == true:
        return mass
    diff = [(a, b) for a, b in zip(true, typed) if a != b]
    if len(diff) != 1:
        return 0.0
    row = CONFUSIONS.get(diff[0][0], {})
    return (1 - mass) * row.get(diff[0][1], 0.0) / sum(row.values()) / len(typed) if row else 0.0


def exhaustive(cands, typed, mass):
    scored = [(q, p * channel_oracle(typed, q, mass), p) for q, p in cands.items()]
    return [(q, s) for q, s, p in sorted(scored, key=lambda t: (-t[1], -t[2], t[0])) if s > 0]


def random_candidates(rng: random.Random, n: int) -> dict[str, float]:
    words = set()
    while len(words) < n:
        words.add("".join(rng.choice("shoapizt") for _ in range(rng.randint(1, 6))))
    raw = {w: rng.randint(1, 20) for w in sorted(words)}
    total = sum(raw.values())
    return {w: c / total for w, c in raw.items()}


class TestPriors:
    def test_single_query(self):
        assert estimate_priors([SearchLogEntry("ski", (), "s")]) == [CandidateEntry("ski", 1.0)]

    def test_ratio(self):
        log = [SearchLogEntry(q, (), "s") for q in "aaab"]
        assert {c.query: c.prior for c in estimate_priors(log)} == {"a": 0.75, "b": 0.25}

    def test_counting_oracle(self):
        rng = random.Random(0)
        queries = [rng.choice(["ski", "golf", "tent", "Ski ", "run"]) for _ in range(100)]
        counts = Counter(q.strip().lower() for q in queries)
        got = {c.query: c.prior for c in estimate_priors([SearchLogEntry(q, (), "s") for q in queries])}
        assert got == {q: n / 100 for q, n in counts.items()}
        assert abs(sum(got.values()) - 1.0) < 1e-9

    def test_empty(self):
        with pytest.raises(IndexBuildError):
            estimate_priors([])


class TestErrorModel:
    def test_mass_bounded_per_query_and_length(self):
        em = ErrorModel()
        for q in ["shoes", "ski gloves", "qwerty"]:
            for n in range(1, len(q) + 1):
                total = em.exact_match_mass + sum(p for _, p in em.typo_variants(q[:n]))
                assert total <= 1.0 + 1e-12

    def test_zh_reaches_sh(self):
        em = ErrorModel()
        assert em.prob("zh", "shoes") > 0
        assert em.prob("zh", "shoes") < em.prob("sh", "shoes")

    def test_adjacency_symmetric(self):
        adj = qwerty_adjacency()
        for a, row in adj.items():
            assert all(a in adj[b] for b in row)
            assert abs(sum(row.values()) - 1.0) < 1e-12

    def test_matches_oracle(self):
        em = ErrorModel(0.8, 1, CONFUSIONS)
        for typed in ["", "s", "z", "sh", "zh", "sj", "zj", "shi", "shoe", "shoesx"]:
            assert em.prob(typed, "shoes") == pytest.approx(channel_oracle(typed, "shoes", 0.8), abs=1e-15)

    @pytest.mark.parametrize("mass", [0.0, 1.5])
    def test_bad_mass(self, mass):
        with pytest.raises(ValueError):
            ErrorModel(mass)


class TestTrie:
    def test_two_candidates(self):
        idx = build_trie([CandidateEntry("shoes", 0.7), CandidateEntry("shirt", 0.3)])
        assert [q for q, _ in retrieve(idx, "sh", 5)] == ["shoes", "shirt"]

    def test_empty_prefix_is_prior_order(self):
        cands = random_candidates(random.Random(1), 15)
        idx = build_trie([CandidateEntry(q, p) for q, p in cands.items()], max_fanout=50)
        expected = sorted(cands, key=lambda q: (-cands[q], q))
        assert [q for q, _ in retrieve(idx, "", 50)] == expected
        assert idx.top_by_prior(4) == expected[:4]

    def test_unknown_prefix(self):
        idx = build_trie([CandidateEntry("shoes", 1.0)])
        assert retrieve(idx, "zzz", 5) == []

    def test_n_beyond_fanout(self):
        cands = random_candidates(random.Random(2), 10)
        idx = build_trie([CandidateEntry(q, p) for q, p in cands.items()], max_fanout=3)
        assert len(retrieve(idx, "", 100)) == 3

    def test_every_prefix_matches_exhaustive_rescoring(self):
        rng = random.Random(3)
        for _ in range(5):
            cands = random_candidates(rng, 20)
            idx = build_trie([CandidateEntry(q, p) for q, p in cands.items()], ErrorModel(0.9, 1, CONFUSIONS), 25)
            prefixes = {q[:n] for q in cands for n in range(len(q) + 1)}
            prefixes |= {p[:i] + c + p[i + 1:] for p in prefixes for i in range(len(p)) for c in "zaijp"}
            for t in prefixes:
                got = retrieve(idx, t, 25)
                want = exhaustive(cands, t, 0.9)[:25]
                assert [q for q, _ in got] == [q for q, _ in want], t
                np.testing.assert_allclose([s for _, s in got], [s for _, s in want], rtol=1e-12)

    def test_exact_only_follows_prior(self):
        cands = random_candidates(random.Random(4), 20)
        idx = build_trie([CandidateEntry(q, p) for q, p in cands.items()], ErrorModel(1.0), 25)
        for t in {q[:2] for q in cands}:
            want = sorted((q for q in cands if q.startswith(t)), key=lambda q: (-cands[q], q))
            assert [q for q, _ in retrieve(idx, t, 25)] == want

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet="shoapiztq ", max_size=7))
    def test_retrieve_sorted(self, typed):
        idx = _fuzz_index()
        scores = [s for _, s in retrieve(idx, typed, 25)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_unnormalized_priors_rejected(self):
        with pytest.raises(IndexBuildError):
            build_trie([CandidateEntry("a", 0.5)])

    def test_bad_fanout(self):
        with pytest.raises(IndexBuildError):
            build_trie([CandidateEntry("a", 1.0)], max_fanout=0)

    def test_save_load_byte_identical(self, tmp_path):
        cands = random_candidates(random.Random(5), 12)
        idx = build_trie([CandidateEntry(q, p) for q, p in cands.items()])
        save_index(idx, tmp_path / "a.idx")
        back = load_index(tmp_path / "a.idx")
        assert back.lists == idx.lists
        save_index(back, tmp_path / "b.idx")
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()

    def test_prefix_normalized(self):
        idx = build_trie([CandidateEntry("ski gloves", 1.0)])
        assert retrieve(idx, "  SKI  G", 1)[0][0] == "ski gloves"


_FUZZ = None


def _fuzz_index():
    global _FUZZ
    if _FUZZ is None:
        cands = random_candidates(random.Random(9), 50)
        _FUZZ = build_trie([CandidateEntry(q, p) for q, p in cands.items()])
    return _FUZZ


class TestMarkov:
    @pytest.mark.parametrize("alpha,others", [
        (1.0, ["gloves ski", "ski ski", "gloves gloves", "ski boots"]),
        (0.1, ["ski", "gloves", "gloves ski", "ski ski", "ski gloves gloves"]),
    ])
    def test_training_query_is_argmax(self, alpha, others):
        # at alpha=1 smoothing mass favours shorter strings, so compare equal token counts there
        m = fit_markov([("ski", "ski gloves")], alpha)
        best = markov_score(m, "ski", "ski gloves").logprob
        for q in others:
            assert markov_score(m, "ski", q).logprob < best

    def test_pure_smoothing(self):
        m = fit_markov([("a", "x y")], alpha=1.0)
        # vocab = {x, y, </s>, <unk>}; "y" never follows <s>
        assert m.prob("a", "<s>", "y") == pytest.approx(1 / (1 + 4))
        assert m.prob("a", "y", "x") == pytest.approx(1 / (1 + 4))

    def test_by_hand_bigrams(self):
        pairs = [("b", "ski gloves"), ("b", "ski boots"), ("b", "ski"), ("c", "golf")]
        m = fit_markov(pairs, alpha=0.5)
        V = 6  # ski gloves boots golf </s> <unk>
        expected = (math.log((3 + 0.5) / (3 + 0.5 * V)) + math.log((1 + 0.5) / (3 + 0.5 * V))
                    + math.log((1 + 0.5) / (1 + 0.5 * V)))
        assert abs(markov_score(m, "b", "ski gloves").logprob - expected) < 1e-12

    def test_conditionals_normalize(self):
        m = fit_markov([("b", "ski gloves"), ("b", "ski"), ("c", "golf ball")], alpha=0.3)
        for bucket in ("b", "c", "*"):
            for prev in ("<s>", "ski", "golf"):
                assert abs(sum(m.prob(bucket, prev, n) for n in m.vocab) - 1.0) < 1e-9

    def test_unknown_bucket_falls_back(self):
        m = fit_markov([("b", "ski")])
        res = markov_score(m, "nope", "ski")
        assert res.used_fallback
        assert res.logprob == markov_score(m, "*", "ski").logprob
        assert not markov_score(m, "b", "ski").used_fallback

    def test_empty_query(self):
        with pytest.raises(ValueError):
            markov_score(fit_markov([("b", "ski")]), "b", "  ")

    def test_roundtrip(self, tmp_path):
        m = fit_markov([("b", "ski gloves"), ("c", "golf")], alpha=0.7)
        save_markov(m, tmp_path / "m.txt")
        back = load_markov(tmp_path / "m.txt")
        for q in ["ski gloves", "golf", "tent"]:
            assert markov_score(back, "b", q) == markov_score(m, "b", q)


class TestSessionBucket:
    def test_modal(self):
        assert session_bucket(["ski", "golf", "ski"]) == "ski"

    def test_tie_goes_to_most_recent(self):
        assert session_bucket(["ski", "golf"]) == "golf"
        assert session_bucket(["golf", "ski", "ski", "golf"]) == "golf"

    def test_empty(self):
        assert session_bucket([]) is None
        assert session_bucket([None]) is None
