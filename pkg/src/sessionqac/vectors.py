"""Dense product, query and session vectors.

Raw product features are reduced with PCA; queries are represented by the
click-weighted mean of the reduced vectors of products clicked after them;
sessions by the mean of viewed products (or the ordered sequence itself).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import CatalogRecord, SearchLogEntry

PCA_HEADER = "# sessionqac-pca v1"
PRODUCTS_HEADER = "# sessionqac-product-vectors v1"
QUERYVEC_HEADER = "# sessionqac-query-vectors v1"

_ORTHO_TOL = 1e-6


class VectorError(ValueError):
    pass


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (K, D), orthonormal rows
    explained_variance_ratio: np.ndarray  # (K,)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]


def _fix_signs(components: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each row so its first non-negligible entry is positive."""
    out = components.copy()
    for row in out:
        nz = np.flatnonzero(np.abs(row) > tol)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return out


def fit_pca(raw_vectors: Sequence[Sequence[float]] | np.ndarray, k: int) -> PcaModel:
    """Top-``k`` principal directions of the mean-centred data (thin SVD)."""
    X = np.asarray(raw_vectors, dtype=np.float64)
    if X.ndim != 2:
        raise VectorError("raw_vectors must be a 2-D array of equal-length vectors")
    n, d = X.shape
    if k < 1 or k > d or k > n:
        raise VectorError(f"k={k} must be between 1 and min(samples={n}, dimension={d})")
    if not np.all(np.isfinite(X)):
        raise VectorError("raw vectors contain non-finite entries")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eig = s**2 / max(n - 1, 1)
    total = eig.sum()
    if total <= np.finfo(float).eps * max(1.0, float(np.abs(X).max()) ** 2):
        raise VectorError("degenerate covariance: data has zero variance")
    comps = _fix_signs(vt[:k])
    ratio = np.clip(eig[:k] / total, 0.0, 1.0)
    gram = comps @ comps.T
    if not np.allclose(gram, np.eye(k), atol=_ORTHO_TOL):
        raise VectorError("component rows failed the orthonormality check")
    return PcaModel(mean, comps, ratio)


def transform(model: PcaModel, raw: Sequence[float] | np.ndarray) -> np.ndarray:
    """Project one vector (or a batch of row vectors) into the reduced space."""
    x = np.asarray(raw, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise VectorError(f"vector dimension {x.shape[-1]} does not match model dimension {model.dim}")
    return (x - model.mean) @ model.components.T


def inverse_transform(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    return np.asarray(reduced, dtype=np.float64) @ model.components + model.mean


def default_k(dim: int, n_samples: int, target: int = 50) -> int:
    return max(1, min(target, dim, n_samples))


# -- product vectors --------------------------------------------------------


class ProductVectors:
    """Lookup of reduced product vectors keyed by (shop_id, sku)."""

    def __init__(self, vectors: Mapping[tuple[str, str], np.ndarray], categories: Mapping[tuple[str, str], str] | None = None):
        self._vecs = {key: np.asarray(v, dtype=np.float64) for key, v in vectors.items()}
        self._cats = dict(categories or {})
        dims = {v.shape for v in self._vecs.values()}
        if len(dims) > 1:
            raise VectorError(f"inconsistent product vector shapes: {sorted(dims)}")
        self.dim = next(iter(dims))[0] if dims else 0

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._vecs

    def __len__(self) -> int:
        return len(self._vecs)

    def get(self, shop_id: str, sku: str) -> np.ndarray:
        try:
            return self._vecs[(shop_id, sku)]
        except KeyError:
            raise KeyError(f"unknown sku {sku!r} for shop {shop_id!r}") from None

    def category(self, shop_id: str, sku: str) -> str | None:
        return self._cats.get((shop_id, sku))

    def for_shop(self, shop_id: str) -> dict[str, np.ndarray]:
        return {sku: v for (shop, sku), v in self._vecs.items() if shop == shop_id}

    def items(self):
        return self._vecs.items()

    def shops(self) -> list[str]:
        return sorted({shop for shop, _ in self._vecs})


def reduce_catalogs(catalogs: Mapping[str, Sequence[CatalogRecord]], k: int | None = None,
                    per_shop: bool = False) -> tuple[dict[str, PcaModel], ProductVectors]:
    """Fit PCA (jointly by default) and project every catalog product.

    Returns the fitted model per shop (the same object for every shop when
    fitting jointly) and the product vector lookup.
    """
    models: dict[str, PcaModel] = {}
    if per_shop:
        groups = {shop: list(recs) for shop, recs in catalogs.items()}
    else:
        groups = {"*": [r for shop in sorted(catalogs) for r in catalogs[shop]]}
    vecs: dict[tuple[str, str], np.ndarray] = {}
    cats: dict[tuple[str, str], str] = {}
    for key, recs in groups.items():
        X = np.array([r.raw_vector for r in recs], dtype=np.float64)
        model = fit_pca(X, k if k is not None else default_k(X.shape[1], X.shape[0]))
        Z = transform(model, X)
        for r, z in zip(recs, Z):
            vecs[(r.shop_id, r.sku)] = z
            cats[(r.shop_id, r.sku)] = r.category
        if per_shop:
            models[key] = model
        else:
            models = {shop: model for shop in catalogs}
    return models, ProductVectors(vecs, cats)


# -- query vectors ----------------------------------------------------------


def build_query_vectors(search_log: Iterable[SearchLogEntry], product_vectors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Click-frequency-weighted mean of the clicked products' vectors, per query.

    ``product_vectors`` maps sku to reduced vector for the log's shop.
    Queries that never received a click are left out.
    """
    totals: dict[str, dict[str, int]] = {}
    for entry in search_log:
        acc = totals.setdefault(entry.query, {})
        for sku, count in entry.clicked_skus:
            acc[sku] = acc.get(sku, 0) + count
    out: dict[str, np.ndarray] = {}
    for query in sorted(totals):
        clicks = totals[query]
        if not clicks:
            continue
        skus = sorted(clicks)
        missing = [s for s in skus if s not in product_vectors]
        if missing:
            raise VectorError(f"no product vector for sku {missing[0]!r} (query {query!r})")
        w = np.array([clicks[s] for s in skus], dtype=np.float64)
        V = np.stack([np.asarray(product_vectors[s], dtype=np.float64) for s in skus])
        out[query] = (w / w.sum()) @ V
    return out


def pool_session(product_vectors: Sequence[np.ndarray], mode: str = "average"):
    """Average the session's product vectors, or pass the sequence through."""
    if len(product_vectors) == 0:
        raise VectorError("cannot pool an empty session")
    if mode == "average":
        return np.mean(np.stack([np.asarray(v, dtype=np.float64) for v in product_vectors]), axis=0)
    if mode == "sequence":
        return list(product_vectors)
    raise VectorError(f"unknown pooling mode {mode!r}")


# -- serialization ----------------------------------------------------------


def _fmt(vec: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in np.ravel(vec))


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")], dtype=np.float64)


def _check_header(lines: list[str], header: str, path: Path) -> None:
    if not lines or lines[0].strip() != header:
        raise VectorError(f"{path}: expected header {header!r}")


def save_pca(model: PcaModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PCA_HEADER + "\n")
        fh.write(json.dumps({"k": model.k, "dim": model.dim}) + "\n")
        fh.write("mean\t" + _fmt(model.mean) + "\n")
        fh.write("ratio\t" + _fmt(model.explained_variance_ratio) + "\n")
        for row in model.components:
            fh.write("component\t" + _fmt(row) + "\n")


def load_pca(path: str | Path) -> PcaModel:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    _check_header(lines, PCA_HEADER, path)
    meta = json.loads(lines[1])
    fields: dict[str, list[np.ndarray]] = {}
    for line in lines[2:]:
        name, _, vec = line.partition("\t")
        fields.setdefault(name, []).append(_parse_vec(vec))
    comps = np.stack(fields["component"])
    if comps.shape != (meta["k"], meta["dim"]):
        raise VectorError(f"{path}: component shape {comps.shape} disagrees with header")
    return PcaModel(fields["mean"][0], comps, fields["ratio"][0])


def save_product_vectors(pv: ProductVectors, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PRODUCTS_HEADER + "\n")
        for (shop, sku), vec in sorted(pv.items()):
            fh.write(f"{shop}\t{sku}\t{pv.category(shop, sku) or ''}\t{_fmt(vec)}\n")


def load_product_vectors(path: str | Path) -> ProductVectors:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    _check_header(lines, PRODUCTS_HEADER, path)
    vecs, cats = {}, {}
    for line in lines[1:]:
        shop, sku, cat, vec = line.split("\t")
        vecs[(shop, sku)] = _parse_vec(vec)
        if cat:
            cats[(shop, sku)] = cat
    return ProductVectors(vecs, cats)


def save_query_vectors(qv: Mapping[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(QUERYVEC_HEADER + "\n")
        for q in sorted(qv):
            fh.write(f"{q}\t{_fmt(qv[q])}\n")


def load_query_vectors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    _check_header(lines, QUERYVEC_HEADER, path)
    out = {}
    for line in lines[1:]:
        q, _, vec = line.partition("\t")
        out[q] = _parse_vec(vec)
    return out
