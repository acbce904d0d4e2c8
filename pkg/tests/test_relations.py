import numpy as np
import pytest

from aurora.cohort import CohortRecord, FactorVector
from aurora.errors import ConfigError, ContractError
from aurora.relations import (build_graph, build_graphs, dump_graph_csv,
                              kernel_weight, sample_pairs)


def _records_from_points(points):
    """Records whose phys-block proxy equals the given coordinates."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    k = points.shape[1]
    p = 4 * k
    recs = []
    for i, pt in enumerate(points):
        feats = np.zeros(p)
        feats[:k] = pt
        recs.append(CohortRecord(id=i, features=feats,
                                 factors=FactorVector(0.0, 0.0, 0.0, 0),
                                 mortality=0, sepsis=0, readmission=0))
    return recs


def _zscore(m):
    std = m.std(axis=0)
    return (m - m.mean(axis=0)) / np.where(std > 0, std, 1.0)


def test_nearest_neighbor_line():
    g = build_graph(_records_from_points([0.0, 1.0, 10.0]), "phys", m=1)
    assert g.neighbors[:, 0].tolist() == [1, 0, 1]


def test_identical_points_guarded_bandwidth():
    g = build_graph(_records_from_points([2.0, 2.0, 2.0]), "phys", m=2)
    assert g.sigma2 == 1e-12
    assert np.array_equal(g.weights, np.ones((3, 2)))
    # ties broken by lower index, never self
    for i in range(3):
        assert i not in g.neighbors[i]
        assert g.neighbors[i].tolist() == sorted(j for j in range(3) if j != i)


def test_bandwidth_is_median_of_retained_distances():
    pts = np.array([0.0, 1.0, 3.0, 7.0])
    g = build_graph(_records_from_points(pts), "phys", m=2)
    # independent oracle: enumerate z-scored distances, keep 2 smallest per
    # anchor (ties by index), take the median
    z = _zscore(pts[:, None])[:, 0]
    retained = []
    for i in range(4):
        d = [(z[i] - z[j]) ** 2 for j in range(4) if j != i]
        idx = [j for j in range(4) if j != i]
        order = sorted(range(3), key=lambda t: (d[t], idx[t]))
        retained.extend([d[order[0]], d[order[1]]])
    assert np.isclose(g.sigma2, np.median(retained), rtol=0, atol=1e-15)


def test_kernel_weight_closed_forms():
    assert kernel_weight(0.0, 1.0) == 1.0
    assert np.isclose(kernel_weight(2.5, 2.5), np.exp(-1.0))
    assert np.isclose(kernel_weight(2.0, 1.0), np.exp(-2.0))
    with pytest.raises(ContractError):
        kernel_weight(1.0, 0.0)
    with pytest.raises(ContractError):
        kernel_weight(-1.0, 1.0)


def test_edge_weights_match_kernel_formula():
    rng = np.random.default_rng(0)
    recs = _records_from_points(rng.normal(size=(40, 2)))
    g = build_graph(recs, "phys", m=5)
    prox = _zscore(np.stack([r.features[:2] for r in recs]))
    for i in range(40):
        for slot in range(5):
            j = g.neighbors[i, slot]
            d2 = float(((prox[i] - prox[j]) ** 2).sum())
            assert abs(g.weights[i, slot] - np.exp(-d2 / g.sigma2)) < 1e-12


def test_median_bandwidth_splits_weights_at_e_minus_one():
    rng = np.random.default_rng(1)
    g = build_graph(_records_from_points(rng.normal(size=(60, 3))), "phys", m=4)
    w = g.weights.ravel()
    e1 = np.exp(-1.0)
    assert (w >= e1 - 1e-9).sum() >= w.size / 2
    assert (w <= e1 + 1e-9).sum() >= w.size / 2


def test_graph_deterministic():
    rng = np.random.default_rng(2)
    recs = _records_from_points(rng.normal(size=(30, 2)))
    g1 = build_graph(recs, "phys", m=3)
    g2 = build_graph(recs, "phys", m=3)
    assert np.array_equal(g1.neighbors, g2.neighbors)
    assert np.array_equal(g1.weights, g2.weights)
    assert g1.sigma2 == g2.sigma2


def test_build_graph_validates_m():
    recs = _records_from_points([0.0, 1.0, 2.0])
    with pytest.raises(ConfigError):
        build_graph(recs, "phys", m=3)
    with pytest.raises(ContractError):
        build_graph(recs, "bmi", m=1)


def test_sample_pairs_whole_cohort_equals_edge_set():
    rng = np.random.default_rng(3)
    recs = _records_from_points(rng.normal(size=(20, 2)))
    graphs = build_graphs(recs, m=3)
    batch = np.arange(20)
    pairs = sample_pairs(graphs, batch)
    assert len(pairs) == 4 * 20 * 3
    got = sorted(pairs.to_tuples())
    expect = sorted((i, int(g.neighbors[i, s]), k, float(g.weights[i, s]))
                    for k, g in enumerate(graphs)
                    for i in range(20) for s in range(3))
    assert got == expect


def test_sample_pairs_singleton_batch_empty():
    recs = _records_from_points([0.0, 1.0, 2.0, 3.0])
    graphs = build_graphs(recs, m=1)
    assert len(sample_pairs(graphs, np.array([2]))) == 0


def test_sample_pairs_chain_example():
    graphs = [build_graph(_records_from_points([0.0, 1.0, 10.0]), "phys", m=1)]
    pairs = sample_pairs(graphs, np.array([0, 1]))
    got = {(int(i), int(j)) for i, j in zip(pairs.i, pairs.j)}
    assert got == {(0, 1), (1, 0)}


def test_sample_pairs_batch_order_invariant_as_multiset():
    rng = np.random.default_rng(4)
    recs = _records_from_points(rng.normal(size=(25, 2)))
    graphs = build_graphs(recs, m=4)
    batch = np.array([3, 8, 1, 15, 20, 7])

    def global_multiset(batch_order):
        pairs = sample_pairs(graphs, batch_order)
        return sorted((int(batch_order[a]), int(batch_order[b]), int(k), float(w))
                      for a, b, k, w in zip(pairs.i, pairs.j, pairs.k, pairs.w))

    assert global_multiset(batch) == global_multiset(batch[::-1])


def test_sample_pairs_rejects_out_of_range():
    recs = _records_from_points([0.0, 1.0, 2.0])
    graphs = build_graphs(recs, m=1)
    with pytest.raises(ContractError):
        sample_pairs(graphs, np.array([0, 5]))


def test_graph_dump_csv(tmp_path):
    g = build_graph(_records_from_points([0.0, 1.0, 10.0]), "phys", m=1)
    path = tmp_path / "graph.csv"
    dump_graph_csv(g, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "factor,anchor,neighbor,weight"
    assert len(lines) == 1 + 3
    assert lines[1].startswith("phys,0,1,")
