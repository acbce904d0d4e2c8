"""Per-factor relational graphs: the contextual similarity operator.

Each factor's operator is realized as an exact m-nearest-neighbor graph over
that factor's observable proxy features (z-scored over the records given),
weighted by a Gaussian kernel whose bandwidth is the median retained squared
distance. The paper-level operator is a pairwise similarity score; the
sparse top-m + median-bandwidth realization is this artifact's choice and is
what the alignment losses consume.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .autodiff import Rng
from .cohort import FACTORS, context_feature_matrix
from .errors import ConfigError, ContractError
from .neighbors import knn_indices, knn_sq_dists

SIGMA_FLOOR = 1e-12  # bandwidth guard when the median distance is 0


@dataclass(frozen=True)
class RelationGraph:
    """m nearest neighbors per anchor with kernel weights in (0, 1]."""

    factor: str
    neighbors: np.ndarray  # (n, m) int64, no self edges
    weights: np.ndarray  # (n, m) float64
    sigma2: float

    @property
    def anchors(self) -> int:
        return self.neighbors.shape[0]

    @property
    def m(self) -> int:
        return self.neighbors.shape[1]


def kernel_weight(dist2, sigma2):
    """Gaussian kernel exp(-d^2 / sigma^2); symmetric, in (0, 1]."""
    if sigma2 <= 0:
        raise ContractError(f"sigma2 must be positive, got {sigma2}")
    dist2 = np.asarray(dist2, dtype=np.float64)
    if np.any(dist2 < 0):
        raise ContractError("squared distance must be nonnegative")
    out = np.exp(-dist2 / sigma2)
    return float(out) if out.ndim == 0 else out


def build_graph(records, factor: str, m: int) -> RelationGraph:
    """Exact m-NN graph on the z-scored proxy features of one factor.

    The bandwidth is the median of all retained squared distances, computed
    before weighting; a zero median (duplicate-heavy data) is floored at
    SIGMA_FLOOR so weights stay defined.
    """
    if factor not in FACTORS:
        raise ContractError(f"unknown factor {factor!r}")
    n = len(records)
    if m < 1 or m >= n:
        raise ConfigError(f"neighbor count m={m} must satisfy 1 <= m < n={n}")

    proxies = context_feature_matrix(records, factor)
    mean = proxies.mean(axis=0)
    std = proxies.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    proxies = (proxies - mean) / std

    idx = knn_indices(proxies, m)
    d2 = knn_sq_dists(proxies, idx)
    sigma2 = float(np.median(d2))
    if sigma2 <= 0:
        sigma2 = SIGMA_FLOOR
    return RelationGraph(factor=factor, neighbors=idx,
                         weights=kernel_weight(d2, sigma2), sigma2=sigma2)


def build_graphs(records, m: int, factors=FACTORS) -> list[RelationGraph]:
    return [build_graph(records, f, m) for f in factors]


@dataclass(frozen=True)
class PairBatch:
    """Sampled alignment pairs for one step, indices localized to the batch.

    Conceptually a list of (i, j, factor, weight) tuples; stored as parallel
    arrays. ``i``/``j`` are positions within the batch, ``k`` indexes the
    factor list the graphs were built from.
    """

    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    w: np.ndarray

    def __len__(self) -> int:
        return self.i.shape[0]

    def for_factor(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.k == k
        return self.i[mask], self.j[mask], self.w[mask]

    def to_tuples(self) -> list[tuple[int, int, int, float]]:
        return [(int(a), int(b), int(c), float(d))
                for a, b, c, d in zip(self.i, self.j, self.k, self.w)]


def sample_pairs(graphs, batch_indices, rng: Rng | None = None) -> PairBatch:
    """Edges of each graph whose anchor and endpoint both lie in the batch.

    Anchors with no in-batch partner for a factor contribute no pairs there
    (documented estimator bias toward dense regions). The result, read as a
    multiset of global pairs, does not depend on the order of batch_indices.
    ``rng`` is accepted for interface stability; the current sampler is the
    deterministic filter and draws nothing.
    """
    del rng
    batch = np.asarray(batch_indices, dtype=np.int64)
    if batch.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return PairBatch(empty, empty, empty, np.empty(0))
    n = graphs[0].anchors
    if batch.min() < 0 or batch.max() >= n:
        raise ContractError("batch index out of range for the relation graphs")

    local = np.full(n, -1, dtype=np.int64)
    local[batch] = np.arange(batch.size)

    ii, jj, kk, ww = [], [], [], []
    for k, graph in enumerate(graphs):
        nbrs = graph.neighbors[batch]  # (B, m) global endpoints
        loc = local[nbrs]
        keep = loc >= 0
        rows, cols = np.nonzero(keep)
        ii.append(rows)
        jj.append(loc[rows, cols])
        kk.append(np.full(rows.shape[0], k, dtype=np.int64))
        ww.append(graph.weights[batch][rows, cols])
    return PairBatch(np.concatenate(ii), np.concatenate(jj),
                     np.concatenate(kk), np.concatenate(ww))


def dump_graph_csv(graph: RelationGraph, path) -> None:
    """Debug dump: CSV rows `factor,anchor,neighbor,weight`."""
    buf = io.StringIO()
    buf.write("factor,anchor,neighbor,weight\n")
    for a in range(graph.anchors):
        for b in range(graph.m):
            buf.write(f"{graph.factor},{a},{graph.neighbors[a, b]},"
                      f"{graph.weights[a, b]:.12g}\n")
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
