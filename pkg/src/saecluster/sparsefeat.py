"""Sparse SAE feature activations and per-document feature summing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

DEFAULT_DIM = 131_072
DEFAULT_K_ACTIVE = 128


class FeatureFormatError(ValueError):
    """Raised when an activation file violates the sparse-triplet contract."""


@dataclass(frozen=True)
class TokenFeatureActivations:
    doc_id: str
    token_index: int
    feature_ids: np.ndarray
    activations: np.ndarray
    dim: int = DEFAULT_DIM

    def __post_init__(self):
        ids = np.asarray(self.feature_ids, dtype=np.int64)
        acts = np.asarray(self.activations, dtype=np.float64)
        object.__setattr__(self, "feature_ids", ids)
        object.__setattr__(self, "activations", acts)
        if ids.shape != acts.shape:
            raise FeatureFormatError("feature_ids and activations differ in length")
        if self.token_index < 0:
            raise FeatureFormatError(f"negative token_index {self.token_index}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.dim):
            raise FeatureFormatError(f"feature id out of [0, {self.dim})")
        if np.any(acts <= 0) or not np.all(np.isfinite(acts)):
            raise FeatureFormatError("token activations must be finite and > 0")
        if np.unique(ids).size != ids.size:
            raise FeatureFormatError(
                f"duplicate feature id within token {self.doc_id}/{self.token_index}")


@dataclass(frozen=True)
class SummedFeatureVector:
    """Per-document sum of token activations, stored as sorted sparse arrays."""

    doc_id: str
    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        order = np.argsort(idx, kind="stable")
        idx, val = idx[order], val[order]
        if idx.size and (idx[0] < 0 or idx[-1] >= self.dim):
            raise FeatureFormatError(f"feature id out of [0, {self.dim}) in {self.doc_id}")
        if idx.size > 1 and np.any(np.diff(idx) == 0):
            raise FeatureFormatError(f"duplicate feature id in {self.doc_id}")
        if np.any(val <= 0) or not np.all(np.isfinite(val)):
            raise FeatureFormatError(f"summed activations must be finite and > 0 ({self.doc_id})")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_mapping(cls, doc_id: str, dim: int, entries: Mapping[int, float]):
        items = sorted((int(k), float(v)) for k, v in entries.items() if v != 0)
        idx = np.array([k for k, _ in items], dtype=np.int64)
        val = np.array([v for _, v in items], dtype=np.float64)
        return cls(doc_id, dim, idx, val)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.values.tolist()))

    def get(self, feature_id: int) -> float:
        pos = np.searchsorted(self.indices, feature_id)
        if pos < self.indices.size and self.indices[pos] == feature_id:
            return float(self.values[pos])
        return 0.0

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def without(self, feature_id: int) -> "SummedFeatureVector":
        keep = self.indices != feature_id
        return SummedFeatureVector(self.doc_id, self.dim, self.indices[keep], self.values[keep])


def sum_token_features(tokens: Sequence[TokenFeatureActivations], doc_id: str | None = None,
                       dim: int | None = None) -> SummedFeatureVector:
    """Sum activations of each feature across all tokens of one document.

    Features that never fire are absent from the result. ``doc_id`` and ``dim``
    are only needed for an empty token list.
    """
    if not tokens:
        if doc_id is None:
            doc_id = ""
        return SummedFeatureVector(doc_id, dim or DEFAULT_DIM, np.empty(0, np.int64), np.empty(0))
    doc = tokens[0].doc_id
    d = tokens[0].dim
    for t in tokens:
        if t.doc_id != doc:
            raise FeatureFormatError(f"mixed doc ids in one summation: {doc!r} vs {t.doc_id!r}")
        if t.dim != d:
            raise FeatureFormatError("tokens disagree on feature dimension")
    ids = np.concatenate([t.feature_ids for t in tokens])
    acts = np.concatenate([t.activations for t in tokens])
    uniq, inv = np.unique(ids, return_inverse=True)
    sums = np.zeros(uniq.size)
    np.add.at(sums, inv, acts)
    return SummedFeatureVector(doc, d, uniq, sums)


def sum_documents(tokens: Iterable[TokenFeatureActivations]) -> list[SummedFeatureVector]:
    """Group token records by document (first-seen order) and sum each group."""
    groups: dict[str, list[TokenFeatureActivations]] = {}
    for t in tokens:
        groups.setdefault(t.doc_id, []).append(t)
    return [sum_token_features(g) for g in groups.values()]


def activation_histogram(vectors: Iterable[SummedFeatureVector], bin_width: float,
                         clip_max: float) -> pd.DataFrame:
    """Histogram of all nonzero summed activations.

    Bins are ``[k*bin_width, (k+1)*bin_width)`` up to ``clip_max``; everything at
    or above ``clip_max`` is pooled into a final open-ended bin.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if clip_max <= 0:
        raise ValueError("clip_max must be positive")
    n_bins = int(np.ceil(clip_max / bin_width - 1e-12))
    edges = np.arange(n_bins + 1) * bin_width
    edges[-1] = clip_max
    vals = [v.values for v in vectors]
    allv = np.concatenate(vals) if vals else np.empty(0)
    below = allv[allv < clip_max]
    counts = np.zeros(n_bins + 1, dtype=np.int64)
    if below.size:
        pos = np.minimum((below // bin_width).astype(np.int64), n_bins - 1)
        counts[:n_bins] = np.bincount(pos, minlength=n_bins)
    counts[n_bins] = int((allv >= clip_max).sum())
    return pd.DataFrame({
        "bin_lo": np.append(edges[:-1], clip_max),
        "bin_hi": np.append(edges[1:], np.inf),
        "count": counts,
    })


def load_token_activations(path: str | Path, dim: int = DEFAULT_DIM,
                           k_active: int = DEFAULT_K_ACTIVE) -> list[TokenFeatureActivations]:
    """Read ``doc_id,token_index,feature_id,activation`` triplets.

    Rows with a zero activation are treated as inactive and skipped; negative
    activations and out-of-range feature ids are fatal.
    """
    df = pd.read_csv(path, dtype={"doc_id": str}, float_precision="round_trip")
    _require_columns(df, ["doc_id", "token_index", "feature_id", "activation"], path)
    if (df["activation"] < 0).any():
        bad = df.loc[df["activation"] < 0].iloc[0]
        raise FeatureFormatError(f"negative activation for doc {bad.doc_id} token {bad.token_index}")
    if ((df["feature_id"] < 0) | (df["feature_id"] >= dim)).any():
        raise FeatureFormatError(f"feature_id outside [0, {dim}) in {path}")
    df = df[df["activation"] > 0]
    out = []
    for (doc, tok), g in df.groupby(["doc_id", "token_index"], sort=False):
        if len(g) > k_active:
            raise FeatureFormatError(
                f"token {doc}/{tok} has {len(g)} active features (> k_active={k_active})")
        out.append(TokenFeatureActivations(str(doc), int(tok), g["feature_id"].to_numpy(),
                                           g["activation"].to_numpy(), dim))
    return out


def write_token_activations(tokens: Iterable[TokenFeatureActivations], path: str | Path) -> None:
    rows = []
    for t in tokens:
        for f, a in zip(t.feature_ids.tolist(), t.activations.tolist()):
            rows.append((t.doc_id, t.token_index, f, a))
    df = pd.DataFrame(rows, columns=["doc_id", "token_index", "feature_id", "activation"])
    df.to_csv(path, index=False, float_format="%.17g")


def load_summed_features(path: str | Path, dim: int = DEFAULT_DIM) -> list[SummedFeatureVector]:
    """Read ``doc_id,feature_id,summed_activation`` rows into vectors (file order)."""
    df = pd.read_csv(path, dtype={"doc_id": str}, float_precision="round_trip")
    _require_columns(df, ["doc_id", "feature_id", "summed_activation"], path)
    if (df["summed_activation"] < 0).any():
        raise FeatureFormatError(f"negative summed activation in {path}")
    if ((df["feature_id"] < 0) | (df["feature_id"] >= dim)).any():
        raise FeatureFormatError(f"feature_id outside [0, {dim}) in {path}")
    df = df[df["summed_activation"] > 0]
    return [SummedFeatureVector(str(doc), dim, g["feature_id"].to_numpy(),
                                g["summed_activation"].to_numpy())
            for doc, g in df.groupby("doc_id", sort=False)]


def write_summed_features(vectors: Iterable[SummedFeatureVector], path: str | Path) -> None:
    frames = [pd.DataFrame({"doc_id": v.doc_id, "feature_id": v.indices,
                            "summed_activation": v.values}) for v in vectors]
    df = (pd.concat(frames, ignore_index=True) if frames
          else pd.DataFrame(columns=["doc_id", "feature_id", "summed_activation"]))
    df.to_csv(path, index=False, float_format="%.17g")


def _require_columns(df: pd.DataFrame, cols: list[str], path) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise FeatureFormatError(f"{path}: missing columns {missing}")
