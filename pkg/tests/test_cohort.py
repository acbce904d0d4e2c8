import numpy as np
import pytest

from aurora.cohort import (CohortConfig, ShiftSpec, apply_shift, block_slice,
                           context_features, factor_arrays, feature_matrix,
                           features_from_factors, generate, load_cohort,
                           loading_vectors, save_cohort)
from aurora.errors import ConfigError, ContractError


def _cfg(**kw):
    base = dict(n=100, p=16, sites=4, rho=0.0, noise=0.5, seed=11)
    base.update(kw)
    return CohortConfig(**base)


def _ks_statistic(a, b):
    xs = np.sort(np.concatenate([a, b]))
    ca = np.searchsorted(np.sort(a), xs, side="right") / len(a)
    cb = np.searchsorted(np.sort(b), xs, side="right") / len(b)
    return np.max(np.abs(ca - cb))


def test_generate_deterministic():
    r1 = generate(_cfg())
    r2 = generate(_cfg())
    for a, b in zip(r1, r2):
        assert a.id == b.id
        assert np.array_equal(a.features, b.features)
        assert a.factors == b.factors
        assert (a.mortality, a.sepsis, a.readmission) == (b.mortality, b.sepsis, b.readmission)


def test_generate_prefix_independent_of_n():
    # per-record streams: the first records do not depend on cohort size
    small = generate(_cfg(n=50))
    big = generate(_cfg(n=120))
    for a, b in zip(small, big[:50]):
        assert np.array_equal(a.features, b.features)
        assert a.factors == b.factors


def test_rho_zero_independence():
    f = factor_arrays(generate(_cfg(n=10000)))
    assert abs(np.corrcoef(f["phys"], f["int"])[0, 1]) < 0.05


def test_rho_entanglement():
    f = factor_arrays(generate(_cfg(n=10000, rho=0.8)))
    corr = np.corrcoef(f["phys"], f["int"])[0, 1]
    assert 0.75 <= corr <= 0.85


def test_noise_zero_identical_factors_identical_features():
    cfg = _cfg(noise=0.0)
    load = loading_vectors(cfg)
    x1 = features_from_factors(load, 0.7, -0.2, 1.1, 2, 0.0, np.zeros(cfg.p))
    x2 = features_from_factors(load, 0.7, -0.2, 1.1, 2, 0.0, np.zeros(cfg.p))
    assert np.array_equal(x1, x2)


def test_mortality_prevalence_band():
    records = generate(_cfg(n=10000))
    prev = np.mean([r.mortality for r in records])
    assert 0.10 <= prev <= 0.35


def test_noise_zero_feature_rank():
    cfg = _cfg(n=400, noise=0.0)
    X = feature_matrix(generate(cfg))
    cov = np.cov(X.T)
    rank = np.linalg.matrix_rank(cov, tol=1e-8)
    assert rank <= 3 + cfg.sites


def test_identity_shift_is_noop():
    cfg = _cfg(n=200)
    spec = ShiftSpec(int_policy_delta=0.0, obs_scale=1.0, site_remap=(0, 1, 2, 3))
    assert spec.is_identity()
    base = generate(cfg)
    shifted = generate(apply_shift(cfg, spec))
    for a, b in zip(base, shifted):
        assert np.array_equal(a.features, b.features)
        assert a.factors == b.factors


def test_obs_scale_shift_scales_variance():
    cfg = _cfg(n=10000)
    base = factor_arrays(generate(cfg))
    shifted = factor_arrays(generate(apply_shift(cfg, ShiftSpec(obs_scale=2.0))))
    ratio = np.var(shifted["obs"]) / np.var(base["obs"])
    assert abs(ratio - 4.0) <= 0.6  # +-15%


def test_shift_never_touches_phys():
    cfg = _cfg(n=10000)
    base = factor_arrays(generate(cfg))
    spec = ShiftSpec(int_policy_delta=-1.0, obs_scale=2.0, site_remap=(1, 2, 3, 0))
    shifted = factor_arrays(generate(apply_shift(cfg, spec)))
    assert abs(base["phys"].mean() - shifted["phys"].mean()) < 0.05
    assert abs(base["phys"].var() - shifted["phys"].var()) < 0.05
    assert _ks_statistic(base["phys"], shifted["phys"]) < 0.02


def test_int_policy_delta_changes_coupling():
    cfg = _cfg(n=10000, rho=0.5)
    shifted = factor_arrays(generate(apply_shift(cfg, ShiftSpec(int_policy_delta=-1.0))))
    corr = np.corrcoef(shifted["phys"], shifted["int"])[0, 1]
    assert corr < -0.35  # coupling flipped to about rho - 1.0


def test_site_remap_permutes_site_loadings():
    cfg = _cfg(n=500, noise=0.0)
    base = generate(cfg)
    shifted = generate(apply_shift(cfg, ShiftSpec(site_remap=(1, 0, 3, 2))))
    load = loading_vectors(cfg)
    for a, b in zip(base, shifted):
        assert a.factors.ctx == b.factors.ctx  # the hidden factor is unchanged
        expect = b.features - load.ctx[(1, 0, 3, 2)[a.factors.ctx]] + load.ctx[a.factors.ctx]
        assert np.allclose(a.features, expect, atol=1e-12)


def test_context_features_blocks():
    records = generate(_cfg(n=5))
    r = records[0]
    phys_block = context_features(r, "phys")
    assert phys_block.shape == (4,)
    assert np.array_equal(phys_block, r.features[0:4])
    ctx_block = context_features(r, "ctx")
    assert np.array_equal(ctx_block, r.features[12:16])
    with pytest.raises(ContractError):
        context_features(r, "weight")


def test_equal_phys_proxies_differ_only_by_leakage():
    # noise=0, rho=0: records sharing phys differ on the phys block only
    # through the 10%-amplitude leakage of the other factors
    cfg = _cfg(noise=0.0, rho=0.0)
    load = loading_vectors(cfg)
    sl = block_slice("phys", cfg.p)
    x1 = features_from_factors(load, 0.9, 0.3, -1.0, 0, 0.0, np.zeros(cfg.p))
    x2 = features_from_factors(load, 0.9, -1.2, 0.4, 3, 0.0, np.zeros(cfg.p))
    diff = x1[sl] - x2[sl]
    expect = (load.int[sl] * (0.3 - (-1.2)) + load.obs[sl] * (-1.0 - 0.4)
              + load.ctx[0][sl] - load.ctx[3][sl])
    assert np.allclose(diff, expect, atol=1e-12)
    assert np.max(np.abs(diff)) < 1.0  # leakage terms stay small


def test_cohort_csv_round_trip(tmp_path):
    cfg = _cfg(n=40)
    records = generate(cfg)
    path = tmp_path / "cohort.csv"
    save_cohort(records, cfg, path)
    loaded, meta = load_cohort(path)
    assert meta == {"n": 40, "p": 16, "S": 4}
    assert len(loaded) == 40
    for a, b in zip(records, loaded):
        assert a.id == b.id
        assert np.allclose(a.features, b.features, rtol=1e-8)
        assert (a.mortality, a.sepsis, a.readmission) == (b.mortality, b.sepsis, b.readmission)
    # a second write of the parsed cohort is byte-identical
    path2 = tmp_path / "again.csv"
    save_cohort(loaded, cfg, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_cohort_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("NOPE v1 n=1 p=8 S=4\n")
    with pytest.raises(ConfigError):
        load_cohort(path)


def test_config_validation():
    with pytest.raises(ConfigError):
        generate(_cfg(n=0))
    with pytest.raises(ConfigError):
        generate(_cfg(p=6))
    with pytest.raises(ConfigError):
        generate(_cfg(p=18))
    with pytest.raises(ConfigError):
        generate(_cfg(rho=0.99))
    with pytest.raises(ConfigError):
        apply_shift(_cfg(), ShiftSpec(obs_scale=0.0))
    with pytest.raises(ConfigError):
        apply_shift(_cfg(), ShiftSpec(site_remap=(0, 1, 1, 2)))


def test_labels_follow_factor_prevalence_order():
    # sicker patients die more often under the logistic label map
    f = factor_arrays(generate(_cfg(n=10000)))
    y = np.array([r.mortality for r in generate(_cfg(n=10000))])
    sick = y[f["phys"] > 1.0].mean()
    healthy = y[f["phys"] < -1.0].mean()
    assert sick > healthy + 0.3
