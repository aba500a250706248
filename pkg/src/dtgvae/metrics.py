"""Clustering validity: NMI, ARI (external) and Silhouette (internal)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import comb


@dataclass
class ContingencyTable:
    counts: np.ndarray  # true class × predicted cluster

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _check_pair(labels_true, labels_pred, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(labels_true)
    b = np.asarray(labels_pred)
    if a.ndim != 1 or b.ndim != 1 or len(a) != len(b):
        raise ValueError(f"label vectors differ in length: {a.shape} vs {b.shape}")
    if len(a) < min_len:
        raise ValueError(f"need at least {min_len} labels, got {len(a)}")
    return a, b


def contingency(labels_true, labels_pred) -> ContingencyTable:
    a, b = _check_pair(labels_true, labels_pred, 0)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    counts = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return ContingencyTable(counts)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_true, labels_pred) -> float:
    """Mutual information normalised by the arithmetic mean of the two entropies."""
    _check_pair(labels_true, labels_pred, 1)
    table = contingency(labels_true, labels_pred)
    h_true, h_pred = _entropy(table.row_sums), _entropy(table.col_sums)
    if h_true == 0.0 and h_pred == 0.0:
        return 1.0
    if h_true == 0.0 or h_pred == 0.0:
        return 0.0
    n = table.n
    nz = table.counts > 0
    pij = table.counts[nz] / n
    outer = np.outer(table.row_sums, table.col_sums)[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return float(np.clip(mi / ((h_true + h_pred) / 2.0), 0.0, 1.0))


def ari(labels_true, labels_pred) -> float:
    _check_pair(labels_true, labels_pred, 2)
    table = contingency(labels_true, labels_pred)
    index = comb(table.counts, 2).sum()
    sum_a = comb(table.row_sums, 2).sum()
    sum_b = comb(table.col_sums, 2).sum()
    expected = sum_a * sum_b / comb(table.n, 2)
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def silhouette(x, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance; singletons score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise ValueError(f"{len(labels)} labels for data of shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("silhouette needs at least two points")
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette is undefined for a single cluster")
    dist = pairwise_distances(x)
    onehot = np.zeros((len(labels), len(uniq)))
    onehot[np.arange(len(labels)), inv] = 1.0
    sizes = onehot.sum(axis=0)
    per_cluster = dist @ onehot  # summed distance from each point to each cluster
    own = sizes[inv]
    rows = np.arange(len(labels))
    with np.errstate(divide="ignore", invalid="ignore"):
        a = per_cluster[rows, inv] / (own - 1)
        mean_other = per_cluster / sizes
    mean_other[rows, inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    s[own == 1] = 0.0
    return float(s.mean())
