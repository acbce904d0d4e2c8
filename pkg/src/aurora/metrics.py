"""Latent-geometry and prediction metrics over frozen embeddings.

None of these quantities have canonical formal definitions in the problem
setting, so every choice here (equal-frequency binning, k=10 neighborhoods,
PC1-then-discretize mutual information, index tie-breaking) is pinned down
explicitly for determinism and is exercised against brute-force oracles in
the test suite.

Conventions used throughout: neighbor queries exclude self and break distance
ties by ascending index; continuous factors are binned by equal-frequency
quartiles (stable rank binning, so ties split deterministically); the site
factor uses its native categories; entropies are in nats.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cohort import FACTORS
from .errors import ConfigError, ContractError
from .neighbors import knn_indices

MI_BINS = 8
DEFAULT_K = 10

METRIC_NAMES = frozenset({
    "mortality_auroc", "sepsis_auroc", "readmission_auroc",
    "mi_overlap", "orthogonality_score", "context_retrieval",
    "neighborhood_purity", "context_entropy", "shift_gap",
    "bayes_ceiling", "param_count",
})


def _valid_metric(name: str) -> bool:
    return name in METRIC_NAMES or name.startswith("recall_at_")


@dataclass(frozen=True)
class EmbeddingSet:
    """Frozen embeddings aligned to cohort record ids."""

    ids: np.ndarray
    z: np.ndarray
    components: tuple[np.ndarray, ...]

    def __post_init__(self):
        n = self.ids.shape[0]
        if self.z.shape[0] != n or any(c.shape[0] != n for c in self.components):
            raise ContractError("embedding row counts disagree")


# --- ranking / probes ---

def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged; exact halves, so AUROC from ranks
    equals brute-force pairwise counting bit for bit."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0], dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs both classes present")
    ranks = _midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sigmoid(t):
    out = np.empty_like(t)
    m = t >= 0
    out[m] = 1.0 / (1.0 + np.exp(-t[m]))
    e = np.exp(t[~m])
    out[~m] = e / (1.0 + e)
    return out


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1e-4,
                 max_iter: int = 5000, grad_tol: float = 1e-6):
    """Full-batch gradient descent on L2-regularized logistic loss.

    Features are standardized internally (train statistics); the intercept is
    unpenalized. Step size is 1/L for the exact Lipschitz bound, so the
    iteration is deterministic. Returns (weights, intercept, mean, std,
    converged).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Xs = (X - mean) / std
    n, d = Xs.shape

    gram = Xs.T @ Xs / n
    lmax = float(np.linalg.eigvalsh(gram).max()) if d else 0.0
    # logistic curvature <= 1/4; intercept column adds 1 to the Gram diagonal
    step = 1.0 / (0.25 * (lmax + 1.0) + l2)

    w = np.zeros(d)
    b = 0.0
    converged = False
    for _ in range(max_iter):
        p = _sigmoid(Xs @ w + b)
        err = (p - y) / n
        gw = Xs.T @ err + l2 * w
        gb = err.sum()
        gnorm = np.sqrt((gw * gw).sum() + gb * gb)
        if gnorm < grad_tol:
            converged = True
            break
        w -= step * gw
        b -= step * gb
    return w, b, mean, std, converged


def linear_probe(train_z, train_y, test_z, test_y, l2: float = 1e-4,
                 max_iter: int = 5000) -> float:
    """Frozen-embedding probe: fit logistic regression on train, AUROC on test."""
    w, b, mean, std, converged = fit_logistic(train_z, train_y, l2=l2,
                                              max_iter=max_iter)
    if not converged:
        warnings.warn("linear probe stopped before reaching gradient tolerance",
                      stacklevel=2)
    scores = (np.asarray(test_z, dtype=np.float64) - mean) / std @ w + b
    return auroc(scores, test_y)


# --- binning ---

def equal_frequency_bins(x, nbins: int) -> np.ndarray:
    """Rank-based equal-count bins; ties split deterministically by index."""
    x = np.asarray(x)
    n = x.shape[0]
    order = np.argsort(x, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    return (ranks * nbins) // n


def factor_bins(factors: dict, factor: str, nbins: int = 4) -> np.ndarray:
    """Quartile bins for continuous factors, native categories for the site."""
    if factor == "ctx":
        return np.asarray(factors["ctx"], dtype=np.int64)
    return equal_frequency_bins(factors[factor], nbins)


# --- retrieval ---

def recall_at_k(queries, gallery, relevance, k: int,
                exclude_self: bool = True) -> float:
    """Fraction of queries with >= 1 relevant item among the k nearest.

    ``relevance`` is an (nq, ng) boolean matrix. When queries and gallery are
    the same set, self matches are excluded from both candidates and
    relevance. Queries with no relevant gallery item are skipped (the oracle
    is supposed to guarantee at least one).
    """
    Q = np.asarray(queries, dtype=np.float64)
    G = np.asarray(gallery, dtype=np.float64)
    rel = np.asarray(relevance, dtype=bool)
    if rel.shape != (Q.shape[0], G.shape[0]):
        raise ContractError(f"relevance shape {rel.shape} does not match "
                            f"({Q.shape[0]}, {G.shape[0]})")
    if k >= G.shape[0]:
        raise ConfigError(f"k={k} must be smaller than the gallery size {G.shape[0]}")
    if exclude_self:
        if Q.shape != G.shape:
            raise ContractError("self-exclusion requires queries == gallery")
        nbr = knn_indices(Q, k)
        rel = rel.copy()
        np.fill_diagonal(rel, False)
    else:
        diff = Q[:, None, :] - G[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        nbr = np.argsort(d, axis=1, kind="stable")[:, :k]

    has_rel = rel.any(axis=1)
    if not has_rel.any():
        raise ContractError("no query has a relevant gallery item")
    hits = rel[np.arange(Q.shape[0])[:, None], nbr].any(axis=1)
    return float(hits[has_rel].mean())


def outcome_quartile_relevance(labels, phys) -> np.ndarray:
    """Default retrieval oracle: same outcome label AND same phys quartile."""
    labels = np.asarray(labels)
    q = equal_frequency_bins(phys, 4)
    return (labels[:, None] == labels[None, :]) & (q[:, None] == q[None, :])


# --- disentanglement ---

def pc1_projection(Z: np.ndarray) -> np.ndarray | None:
    """First principal component scores; None for a zero-variance matrix."""
    Zc = Z - Z.mean(axis=0)
    if not np.any(Zc):
        return None
    _, s, vt = np.linalg.svd(Zc, full_matrices=False)
    if s[0] == 0:
        return None
    v = vt[0]
    # deterministic sign: largest-magnitude loading is positive
    j = int(np.argmax(np.abs(v)))
    if v[j] < 0:
        v = -v
    return Zc @ v


def plugin_mi(a_bins: np.ndarray, b_bins: np.ndarray, na: int, nb: int):
    """Plug-in mutual information of two discrete variables, in nats.

    Returns (mi, h_a, h_b). Entropies use the same empirical distributions,
    so MI of a variable with itself equals its entropy exactly.
    """
    n = a_bins.shape[0]
    joint = np.zeros((na, nb))
    np.add.at(joint, (a_bins, b_bins), 1.0)
    joint /= n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa[:, None] * pb[None, :])[nz])).sum())
    h_a = float(-(pa[pa > 0] * np.log(pa[pa > 0])).sum())
    h_b = float(-(pb[pb > 0] * np.log(pb[pb > 0])).sum())
    return mi, h_a, h_b


def mi_overlap(components, factors: dict, nbins: int = MI_BINS) -> float:
    """Mean normalized MI between each subspace's PC1 and every non-target
    factor. Subspace k targets the k-th factor; zero-variance components are
    flagged and contribute 0."""
    n = components[0].shape[0]
    if n < 1000:
        warnings.warn(f"mi_overlap called with n={n} < 1000; the plug-in "
                      "estimate will carry noticeable bias", stacklevel=2)
    K = len(components)
    vals = []
    for k in range(K):
        proj = pc1_projection(np.asarray(components[k], dtype=np.float64))
        if proj is None:
            warnings.warn(f"subspace {k} is degenerate (zero variance); "
                          "its MI contributions are 0", stacklevel=2)
        for f in FACTORS:
            if f == FACTORS[k]:
                continue
            if proj is None:
                vals.append(0.0)
                continue
            a = equal_frequency_bins(proj, nbins)
            if f == "ctx":
                b = np.asarray(factors["ctx"], dtype=np.int64)
                nb = int(b.max()) + 1
            else:
                b = equal_frequency_bins(factors[f], nbins)
                nb = nbins
            mi, h_a, h_b = plugin_mi(a, b, nbins, nb)
            denom = min(h_a, h_b)
            vals.append(mi / denom if denom > 0 else 0.0)
    return float(np.mean(vals))


def orthogonality_score(components) -> float:
    """1 - mean |cos| between distinct subspace components of the same record.

    Zero-norm vectors contribute |cos| = 0. Range [0, 1]; 1 means every
    cross-subspace pair is exactly orthogonal.
    """
    comps = [np.asarray(c, dtype=np.float64) for c in components]
    if comps[0].shape[0] < 1:
        raise ContractError("orthogonality score needs at least 1 sample")
    norms = [np.sqrt((c * c).sum(axis=1)) for c in comps]
    total = 0.0
    count = 0
    for a in range(len(comps)):
        for b in range(len(comps)):
            if a == b:
                continue
            dots = (comps[a] * comps[b]).sum(axis=1)
            denom = norms[a] * norms[b]
            cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
            total += np.abs(cos).sum()
            count += comps[a].shape[0]
    return float(1.0 - total / count)


def context_retrieval(components, factors: dict, k: int = DEFAULT_K) -> float:
    """Mean fraction of k nearest neighbors (within each subspace) sharing the
    query's target-factor bin; averaged over subspaces."""
    scores = []
    for kk, comp in enumerate(components):
        bins = factor_bins(factors, FACTORS[kk])
        nbr = knn_indices(np.asarray(comp, dtype=np.float64), k)
        share = (bins[nbr] == bins[:, None]).mean(axis=1)
        scores.append(share.mean())
    return float(np.mean(scores))


def neighborhood_purity(Z, factors: dict, k: int = DEFAULT_K) -> float:
    """Fraction of k nearest neighbors in the full latent sharing the query's
    phys quartile."""
    labels = factor_bins(factors, "phys")
    nbr = knn_indices(np.asarray(Z, dtype=np.float64), k)
    return float((labels[nbr] == labels[:, None]).mean(axis=1).mean())


def context_entropy(Z, factors: dict, k: int = DEFAULT_K) -> float:
    """Mean entropy (nats) of the phys-quartile histogram among the k nearest
    neighbors in the full latent. Range [0, ln 4]."""
    labels = factor_bins(factors, "phys")
    nbr = knn_indices(np.asarray(Z, dtype=np.float64), k)
    ent = np.empty(Z.shape[0])
    for i in range(Z.shape[0]):
        counts = np.bincount(labels[nbr[i]], minlength=4).astype(np.float64)
        p = counts / k
        nz = p > 0
        ent[i] = float(-(p[nz] * np.log(p[nz])).sum())
    return float(ent.mean())


# --- tables ---

@dataclass
class MetricsTable:
    """Ordered (metric, split, method, value) rows; the grid report's backbone."""

    rows: list[tuple[str, str, str, float]] = field(default_factory=list)

    def add(self, metric: str, split: str, method: str, value: float) -> None:
        if not _valid_metric(metric):
            raise ContractError(f"unknown metric name {metric!r}")
        value = float(value)
        if not np.isfinite(value):
            raise ContractError(f"non-finite value for metric {metric!r}")
        self.rows.append((metric, split, method, value))

    def value(self, metric: str, split: str, method: str) -> float:
        for m, s, me, v in self.rows:
            if (m, s, me) == (metric, split, method):
                return v
        raise ContractError(f"missing metric row ({metric}, {split}, {method})")

    def has(self, metric: str, split: str, method: str) -> bool:
        return any((m, s, me) == (metric, split, method) for m, s, me, _ in self.rows)

    def methods(self) -> list[str]:
        seen = []
        for _, _, me, _ in self.rows:
            if me not in seen:
                seen.append(me)
        return seen

    def to_csv(self) -> str:
        lines = ["metric,split,method,value"]
        for m, s, me, v in self.rows:
            lines.append(f"{m},{s},{me},{v:.6f}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "MetricsTable":
        table = MetricsTable()
        lines = text.strip().splitlines()
        if not lines or lines[0] != "metric,split,method,value":
            raise ConfigError("bad metrics CSV header")
        for line in lines[1:]:
            m, s, me, v = line.split(",")
            table.add(m, s, me, float(v))
        return table


def shift_gap(table_in: MetricsTable, table_shifted: MetricsTable,
              metric: str = "mortality_auroc") -> dict[str, float]:
    """In-domain minus shifted score per method; smaller is more robust."""
    gaps = {}
    for method in table_in.methods():
        if not table_in.has(metric, "test", method):
            continue
        if not table_shifted.has(metric, "shifted", method):
            raise ContractError(f"method {method!r} missing from the shifted table")
        gaps[method] = (table_in.value(metric, "test", method)
                        - table_shifted.value(metric, "shifted", method))
    if not gaps:
        raise ContractError("no methods with in-domain scores found")
    return gaps


def pca2d(Z: np.ndarray) -> np.ndarray:
    """First two principal-component coordinates with a deterministic sign."""
    Zc = np.asarray(Z, dtype=np.float64)
    Zc = Zc - Zc.mean(axis=0)
    _, _, vt = np.linalg.svd(Zc, full_matrices=False)
    out = np.zeros((Z.shape[0], 2))
    for i in range(min(2, vt.shape[0])):
        v = vt[i]
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        out[:, i] = Zc @ v
    return out
