"""One global PCA over all summed feature vectors.

Sparse inputs are never densified corpus-wide when transforming: for a sparse
``v`` the projection is ``C[:, idx] @ v[idx] - C @ mean`` where the second term
is cached on the model.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, svds

from .sparsefeat import SummedFeatureVector

log = logging.getLogger(__name__)

DEFAULT_N_COMPONENTS = 4000
# Above this many centered-matrix entries the fit switches to an implicit
# (never densified) truncated SVD.
DENSE_SVD_MAX_ENTRIES = 50_000_000


@dataclass(frozen=True)
class DenseVector:
    doc_id: str
    values: np.ndarray


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    total_variance: float
    _mean_proj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        self.components = np.ascontiguousarray(self.components, dtype=np.float64)
        self.explained_variance = np.asarray(self.explained_variance, dtype=np.float64)
        self._mean_proj = self.components @ self.mean

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    def variance_table(self) -> pd.DataFrame:
        ratio = self.explained_variance_ratio
        return pd.DataFrame({
            "component": np.arange(self.n_components),
            "explained_variance": self.explained_variance,
            "ratio": ratio,
            "cumulative_ratio": np.cumsum(ratio),
        })


def _as_csr(vectors: Sequence[SummedFeatureVector]) -> sp.csr_matrix:
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"vectors disagree on dimension: {sorted(dims)}")
    dim = dims.pop()
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([v.nnz for v in vectors])
    indices = np.concatenate([v.indices for v in vectors]) if vectors else np.empty(0, np.int64)
    data = np.concatenate([v.values for v in vectors]) if vectors else np.empty(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every component made positive
    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), pivot])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(vectors: Sequence[SummedFeatureVector], n_components: int | None = None,
            method: str = "auto") -> PcaModel:
    """Fit the global projection.

    ``method`` is ``"svd"`` (economy SVD of the centered document matrix),
    ``"cov"`` (eigen-decomposition of the feature covariance), ``"implicit"``
    (truncated SVD through a centered linear operator) or ``"auto"``.
    """
    n = len(vectors)
    if n < 2:
        raise ValueError("PCA needs at least two documents")
    X = _as_csr(vectors)
    dim = X.shape[1]
    if n_components is None:
        n_components = min(DEFAULT_N_COMPONENTS, n - 1, dim)
    if not 1 <= n_components <= min(n, dim):
        raise ValueError(f"n_components={n_components} outside [1, min(n_docs, dim)={min(n, dim)}]")

    mean = np.asarray(X.mean(axis=0)).ravel()
    sq = X.multiply(X).sum()
    total_var = float(max(sq - n * mean.dot(mean), 0.0) / (n - 1))

    if method == "auto":
        if n >= dim:
            method = "cov"
        elif n * dim <= DENSE_SVD_MAX_ENTRIES or n_components >= min(n, dim) - 1:
            method = "svd"
        else:
            method = "implicit"

    if method == "svd":
        Xc = X.toarray() - mean
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        comps, var = vt[:n_components], s[:n_components] ** 2 / (n - 1)
    elif method == "cov":
        cov = (np.asarray((X.T @ X).todense()) - n * np.outer(mean, mean)) / (n - 1)
        w, v = np.linalg.eigh(cov)
        order = np.argsort(w)[::-1][:n_components]
        comps, var = v[:, order].T, np.clip(w[order], 0.0, None)
    elif method == "implicit":
        # centered products for vectors and (svds-internal) column blocks alike
        def centered(x):
            return X @ x - mean @ x

        def centered_t(y):
            return X.T @ y - np.multiply.outer(mean, y.sum(axis=0))

        op = LinearOperator((n, dim), dtype=np.float64, matvec=centered, rmatvec=centered_t,
                            matmat=centered, rmatmat=centered_t)
        _, s, vt = svds(op, k=n_components, random_state=0)
        order = np.argsort(s)[::-1]
        comps, var = vt[order], s[order] ** 2 / (n - 1)
    else:
        raise ValueError(f"unknown PCA method {method!r}")

    scale = max(var[0], total_var, 1e-300) if var.size else 1.0
    if np.any(var <= 1e-12 * scale):
        warnings.warn(f"data rank is below n_components={n_components}; "
                      "trailing components carry no variance", RuntimeWarning, stacklevel=2)
        var = np.where(var <= 1e-12 * scale, 0.0, var)
    comps = _fix_signs(comps)
    model = PcaModel(mean, comps, var, total_var)
    log.info("PCA fit: %d docs, dim %d, %d components, cumulative variance %.4f",
             n, dim, n_components, float(model.explained_variance_ratio.sum()))
    return model


def transform(model: PcaModel, v: SummedFeatureVector) -> DenseVector:
    """``components @ (dense(v) - mean)`` through the sparse entries of ``v``."""
    if v.dim != model.dim:
        raise ValueError(f"vector dim {v.dim} != model dim {model.dim}")
    vals = model.components[:, v.indices] @ v.values - model._mean_proj
    return DenseVector(v.doc_id, vals)


def transform_many(model: PcaModel, vectors: Sequence[SummedFeatureVector]) -> np.ndarray:
    if not vectors:
        return np.empty((0, model.n_components))
    X = _as_csr(vectors)
    if X.shape[1] != model.dim:
        raise ValueError(f"vector dim {X.shape[1]} != model dim {model.dim}")
    return np.asarray((X @ model.components.T)) - model._mean_proj


def transform_with_feature_zeroed(model: PcaModel, v: SummedFeatureVector,
                                  z: int) -> DenseVector:
    """Transform of ``v`` with feature ``z`` removed, via linearity of the projection."""
    base = transform(model, v)
    xz = v.get(z)
    if xz == 0.0:
        return base
    return DenseVector(v.doc_id, base.values - xz * model.components[:, z])


def inverse_transform(model: PcaModel, g: np.ndarray) -> np.ndarray:
    return np.asarray(g) @ model.components + model.mean


# Binary layout (little endian): int64 dim, int64 n_components,
# float64[dim] mean, float64[n_components*dim] components (row major),
# float64[n_components] explained variance, float64 total variance.
_HEADER = struct.Struct("<qq")


def save_model(model: PcaModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(model.dim, model.n_components))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(model.components.astype("<f8").tobytes())
        fh.write(model.explained_variance.astype("<f8").tobytes())
        fh.write(np.array([model.total_variance], dtype="<f8").tobytes())


def load_model(path: str | Path) -> PcaModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated PCA model")
    dim, k = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * (dim + k * dim + k + 1)
    if dim <= 0 or k <= 0 or len(raw) != expected:
        raise ValueError(f"{path}: malformed PCA model (dim={dim}, n_components={k})")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    mean = body[:dim]
    comps = body[dim:dim + k * dim].reshape(k, dim)
    var = body[dim + k * dim:dim + k * dim + k]
    total = float(body[-1])
    return PcaModel(mean.copy(), comps.copy(), var.copy(), total)
