import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sessionqac.rerank import MISSING_SIMILARITY, RerankError, RerankRequest, cosine, rerank


def _oracle(cands, qv, sv, n):
    """Stable sort by cosine; vector-less candidates appended in input order."""
    def cos(a, b):
        return float(a @ b / np.sqrt((a @ a) * (b @ b)))
    with_vec = [(q, cos(qv[q], sv)) for q, _ in cands if q in qv]
    without = [(q, MISSING_SIMILARITY) for q, _ in cands if q not in qv]
    return (sorted(with_vec, key=lambda t: -t[1]) + without)[:n]


class TestCosine:
    def test_self(self):
        assert cosine([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_formula(self):
        a, b = np.array([0.3, -1.2, 2.0]), np.array([1.5, 0.25, -0.5])
        assert abs(cosine(a, b) - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))) < 1e-12

    def test_zero_vector(self):
        with pytest.raises(RerankError):
            cosine([0.0, 0.0], [1.0, 0.0])


class TestRerank:
    def test_identical_vectors_keep_input_order(self):
        cands = [("c", 0.5), ("a", 0.3), ("b", 0.2)]
        qv = {q: np.array([1.0, 1.0]) for q, _ in cands}
        out = rerank(RerankRequest(cands, np.array([0.2, 0.9]), 3), qv)
        assert [q for q, _ in out] == ["c", "a", "b"]

    def test_matching_candidate_first(self):
        cands = [("a", 0.5), ("b", 0.3), ("c", 0.2)]
        qv = {"a": np.array([1.0, 0.0, 0.0]), "b": np.array([0.0, 1.0, 0.0]), "c": np.array([0.0, 0.0, 1.0])}
        out = rerank(RerankRequest(cands, qv["c"].copy(), 3), qv)
        assert out[0] == ("c", 1.0)

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        cands = [(f"q{i}", 1.0 - i / 10) for i in range(10)]
        qv = {q: rng.normal(size=4) for q, _ in cands if q not in ("q3", "q7")}
        sv = rng.normal(size=4)
        out = rerank(RerankRequest(cands, sv, 10), qv)
        expected = _oracle(cands, qv, sv, 10)
        assert [q for q, _ in out] == [q for q, _ in expected]
        np.testing.assert_allclose([s for _, s in out], [s for _, s in expected], atol=1e-12)
        assert [q for q, _ in out[-2:]] == ["q3", "q7"]

    def test_truncation(self):
        cands = [(f"q{i}", 1.0) for i in range(6)]
        qv = {q: np.array([1.0, float(i)]) for i, (q, _) in enumerate(cands)}
        assert len(rerank(RerankRequest(cands, np.array([0.0, 1.0]), 2), qv)) == 2

    def test_empty(self):
        assert rerank(RerankRequest([], np.ones(2), 5), {}) == []

    @pytest.mark.parametrize("sv", [None, np.zeros(3)])
    def test_no_session_information_bypasses(self, sv):
        cands = [("a", 0.6), ("b", 0.4)]
        qv = {"a": np.array([1.0, 0, 0]), "b": np.array([0, 1.0, 0])}
        assert rerank(RerankRequest(cands, sv, 5), qv) == cands

    def test_non_finite_session_vector(self):
        with pytest.raises(RerankError):
            rerank(RerankRequest([("a", 1.0)], np.array([np.nan, 1.0]), 1), {"a": np.ones(2)})

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        cands = [(f"q{i}", 1.0) for i in range(8)]
        qv = {q: rng.normal(size=3) for q, _ in cands}
        sv = rng.normal(size=3)
        a = rerank(RerankRequest(cands, sv, 8), qv)
        b = rerank(RerankRequest(cands, c * sv, 8), qv)
        assert [q for q, _ in a] == [q for q, _ in b]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_appending_candidate_keeps_relative_order(self, seed):
        rng = np.random.default_rng(seed)
        cands = [(f"q{i}", 1.0) for i in range(6)]
        qv = {q: rng.normal(size=3) for q, _ in cands}
        qv["new"] = rng.normal(size=3)
        sv = rng.normal(size=3)
        before = [q for q, _ in rerank(RerankRequest(cands, sv, 10), qv)]
        after = [q for q, _ in rerank(RerankRequest(cands + [("new", 0.0)], sv, 10), qv) if q != "new"]
        assert before == after
