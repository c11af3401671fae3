import numpy as np
import pytest

from sessionqac.encdec import Vocabulary, init_model
from sessionqac.lm_index import CandidateEntry, ErrorModel, build_trie
from sessionqac.session import lookup_from_mapping

QUERIES = {
    "ski gloves": 0.30,
    "ski boots": 0.20,
    "skate": 0.15,
    "golf balls": 0.12,
    "golf club": 0.10,
    "surf wax": 0.08,
    "sup board": 0.05,
}


class ServiceWorld:
    """Two shops sharing a query list; product vectors in three directions."""

    def __init__(self):
        self.index = build_trie([CandidateEntry(q, p) for q, p in QUERIES.items()], ErrorModel(), 25)
        self.products = {
            ("a", "ski1"): np.array([1.0, 0.0, 0.0]),
            ("a", "golf1"): np.array([0.0, 1.0, 0.0]),
            ("a", "surf1"): np.array([0.0, 0.0, 1.0]),
            ("b", "ski2"): np.array([0.9, 0.1, 0.0]),
            ("b", "golf2"): np.array([0.1, 0.9, 0.0]),
        }
        by_query = {"ski gloves": [1, 0.1, 0], "ski boots": [1, 0, 0.1], "skate": [0.7, 0, 0.7],
                    "golf balls": [0, 1, 0], "golf club": [0.1, 1, 0], "surf wax": [0, 0, 1]}
        self.query_vectors = {shop: {q: np.array(v, dtype=float) for q, v in by_query.items()} for shop in ("a", "b")}
        vocab = Vocabulary.from_queries(QUERIES)
        self.models = {shop: init_model(vocab, 3, 16, "avg", seed) for seed, shop in enumerate(("a", "b"))}
        self.lookup = lookup_from_mapping(self.products)


@pytest.fixture
def world():
    return ServiceWorld()


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
