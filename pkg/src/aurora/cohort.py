"""Synthetic patient cohorts with known ground-truth factors.

Every record carries four hidden factors (physiologic severity, intervention
intensity, observation density, site id). Features are a linear mix of the
factors through fixed loading vectors with block-dominant support, so each
factor owns one quarter of the feature vector plus 10% amplitude leakage into
the other blocks. Outcome labels are Bernoulli draws from logistic functions
of the factors, which gives every downstream metric an exact oracle.

All randomness is keyed Philox: loading vectors from (seed, LOADINGS_TAG),
record i from (seed, i). Output is therefore independent of generation order
or worker count, and byte-identical across runs.

Per-record draw order (fixed; shifts transform values, never the draws):
eps_phys, eps_int, eps_obs, ctx, feature noise vector, three label uniforms.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Rng, Tensor
from .errors import ConfigError, ContractError

FACTORS = ("phys", "int", "obs", "ctx")
LEAK = 0.1  # off-block loading amplitude
LOADINGS_TAG = 2 ** 63  # disjoint from record ids

_MORT = (2.0, 0.0, 0.0, -1.5)  # coefficients on (phys, int, obs, 1)
_SEPSIS = (1.5, 0.0, 0.5, -1.5)
_READMIT = (0.8, 0.8, 0.0, -1.0)


@dataclass(frozen=True)
class FactorVector:
    """Hidden ground truth for one record; never shown to models."""

    phys: float
    int: float
    obs: float
    ctx: int


@dataclass(frozen=True)
class CohortRecord:
    id: int
    features: Tensor
    factors: FactorVector
    mortality: int
    sepsis: int
    readmission: int


@dataclass(frozen=True)
class ShiftSpec:
    """Contextual distribution shift; leaves the phys marginal untouched.

    int_policy_delta shifts the intervention factor's dependence on phys:
    the coupling coefficient becomes rho + delta (an intervention-policy
    change), while the idiosyncratic noise keeps its unshifted scale. A plain
    additive constant would be invisible to every ranking metric, so it could
    never exercise robustness. obs_scale multiplies observation density,
    site_remap permutes the site loading rows.
    """

    int_policy_delta: float = 0.0
    obs_scale: float = 1.0
    site_remap: tuple[int, ...] | None = None

    def is_identity(self) -> bool:
        remap_id = self.site_remap is None or tuple(self.site_remap) == tuple(
            range(len(self.site_remap)))
        return self.int_policy_delta == 0.0 and self.obs_scale == 1.0 and remap_id


@dataclass(frozen=True)
class CohortConfig:
    n: int
    p: int = 32
    sites: int = 4
    rho: float = 0.5
    noise: float = 0.5
    seed: int = 0
    shift: ShiftSpec | None = None


def validate_config(cfg: CohortConfig) -> None:
    if cfg.n < 1:
        raise ConfigError(f"cohort size must be >= 1, got {cfg.n}")
    if cfg.p < 8 or cfg.p % 4 != 0:
        raise ConfigError(f"feature dim must be >= 8 and divisible by 4, got {cfg.p}")
    if cfg.sites < 1:
        raise ConfigError(f"site count must be >= 1, got {cfg.sites}")
    if not -0.95 <= cfg.rho <= 0.95:
        raise ConfigError(f"rho must lie in [-0.95, 0.95], got {cfg.rho}")
    if cfg.noise < 0:
        raise ConfigError(f"noise must be nonnegative, got {cfg.noise}")
    if cfg.shift is not None:
        _validate_shift(cfg.shift, cfg.sites)


def _validate_shift(spec: ShiftSpec, sites: int) -> None:
    if spec.obs_scale <= 0:
        raise ConfigError(f"obs_scale must be positive, got {spec.obs_scale}")
    if spec.site_remap is not None and sorted(spec.site_remap) != list(range(sites)):
        raise ConfigError(f"site_remap must be a permutation of 0..{sites - 1}")


def block_slice(factor: str, p: int) -> slice:
    """Dominant loading block of one factor: p/4 consecutive coordinates."""
    if factor not in FACTORS:
        raise ContractError(f"unknown factor {factor!r}")
    width = p // 4
    k = FACTORS.index(factor)
    return slice(k * width, (k + 1) * width)


@dataclass(frozen=True)
class Loadings:
    phys: Tensor  # (p,)
    int: Tensor  # (p,)
    obs: Tensor  # (p,)
    ctx: Tensor  # (sites, p)


def loading_vectors(cfg: CohortConfig) -> Loadings:
    """Fixed loading vectors drawn once from the seed."""
    rng = Rng(cfg.seed, LOADINGS_TAG)
    vecs = {}
    for factor in ("phys", "int", "obs"):
        v = rng.normal(cfg.p)
        mask = np.full(cfg.p, LEAK)
        mask[block_slice(factor, cfg.p)] = 1.0
        vecs[factor] = v * mask
    ctx = rng.normal((cfg.sites, cfg.p))
    mask = np.full(cfg.p, LEAK)
    mask[block_slice("ctx", cfg.p)] = 1.0
    vecs["ctx"] = ctx * mask
    return Loadings(**vecs)


def features_from_factors(load: Loadings, phys, intv, obs, site, noise: float,
                          eps: Tensor) -> Tensor:
    """The documented generative map; shared by generate() and fresh views.

    phys/intv/obs are scalars or (n,) arrays, site is the (already remapped)
    site index, eps is standard normal of the feature shape.
    """
    phys = np.asarray(phys, dtype=np.float64)
    x = (np.multiply.outer(phys, load.phys)
         + np.multiply.outer(np.asarray(intv, dtype=np.float64), load.int)
         + np.multiply.outer(np.asarray(obs, dtype=np.float64), load.obs)
         + load.ctx[np.asarray(site)]
         + noise * eps)
    return x


def _sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


def _label_prob(coeffs, phys, intv, obs):
    a, b, c, d = coeffs
    return _sigmoid(a * phys + b * intv + c * obs + d)


def generate(cfg: CohortConfig, rng: Rng | None = None) -> list[CohortRecord]:
    """Draw a cohort; record i uses the Philox stream keyed (seed, i).

    ``rng`` only supplies an alternative seed; its internal state is never
    consumed, so sharding records across workers cannot change the output.
    """
    validate_config(cfg)
    seed = rng.seed if rng is not None else cfg.seed
    load = loading_vectors(replace(cfg, seed=seed))
    shift = cfg.shift if cfg.shift is not None else ShiftSpec()
    remap = np.asarray(shift.site_remap if shift.site_remap is not None
                       else range(cfg.sites))
    sq = float(np.sqrt(1.0 - cfg.rho ** 2))

    records = []
    for i in range(cfg.n):
        g = Rng(seed, i)
        eps = g.normal(3)
        ctx = int(g.integers(cfg.sites))
        feat_eps = g.normal(cfg.p)
        u = g.random(3)

        phys = float(eps[0])
        intv = (cfg.rho + shift.int_policy_delta) * phys + sq * float(eps[1])
        obs = (0.5 * phys + 0.5 * float(eps[2])) * shift.obs_scale

        x = features_from_factors(load, phys, intv, obs, int(remap[ctx]),
                                  cfg.noise, feat_eps)
        records.append(CohortRecord(
            id=i,
            features=x,
            factors=FactorVector(phys=phys, int=intv, obs=obs, ctx=ctx),
            mortality=int(u[0] < _label_prob(_MORT, phys, intv, obs)),
            sepsis=int(u[1] < _label_prob(_SEPSIS, phys, intv, obs)),
            readmission=int(u[2] < _label_prob(_READMIT, phys, intv, obs)),
        ))
    return records


def apply_shift(cfg: CohortConfig, spec: ShiftSpec) -> CohortConfig:
    """Attach a shift to a config; generation semantics are in generate()."""
    validate_config(cfg)
    _validate_shift(spec, cfg.sites)
    return replace(cfg, shift=spec)


def context_features(record: CohortRecord, factor: str) -> Tensor:
    """Observable proxy for one factor: the features over its dominant block.

    This is what relational graphs are built from; the hidden factor itself
    is never used, so training stays fully self-supervised.
    """
    return record.features[block_slice(factor, record.features.shape[0])].copy()


def context_feature_matrix(records, factor: str) -> Tensor:
    p = records[0].features.shape[0]
    sl = block_slice(factor, p)
    return np.stack([r.features[sl] for r in records])


def feature_matrix(records) -> Tensor:
    return np.stack([r.features for r in records])


def label_array(records, target: str) -> np.ndarray:
    if target not in ("mortality", "sepsis", "readmission"):
        raise ContractError(f"unknown label {target!r}")
    return np.array([getattr(r, target) for r in records], dtype=np.int64)


def factor_arrays(records) -> dict[str, np.ndarray]:
    return {
        "phys": np.array([r.factors.phys for r in records]),
        "int": np.array([r.factors.int for r in records]),
        "obs": np.array([r.factors.obs for r in records]),
        "ctx": np.array([r.factors.ctx for r in records], dtype=np.int64),
    }


def oracle_score(records, target: str) -> np.ndarray:
    """Bayes-optimal score for a label: its own logistic logit of the factors."""
    coeffs = {"mortality": _MORT, "sepsis": _SEPSIS, "readmission": _READMIT}
    if target not in coeffs:
        raise ContractError(f"unknown label {target!r}")
    f = factor_arrays(records)
    a, b, c, d = coeffs[target]
    return a * f["phys"] + b * f["int"] + c * f["obs"] + d


def fresh_view(records, cfg: CohortConfig, rng: Rng) -> Tensor:
    """Second noise-draw view: same factors and site, fresh feature noise."""
    validate_config(cfg)
    load = loading_vectors(cfg)
    shift = cfg.shift if cfg.shift is not None else ShiftSpec()
    remap = np.asarray(shift.site_remap if shift.site_remap is not None
                       else range(cfg.sites))
    f = factor_arrays(records)
    eps = rng.normal((len(records), cfg.p))
    return features_from_factors(load, f["phys"], f["int"], f["obs"],
                                 remap[f["ctx"]], cfg.noise, eps)


# --- cohort file format: `AURC v1` header line, then plain CSV rows ---

def save_cohort(records, cfg: CohortConfig, path) -> None:
    """Write `AURC v1 n=<n> p=<p> S=<S>` then one CSV row per record."""
    p = records[0].features.shape[0]
    buf = io.StringIO()
    buf.write(f"AURC v1 n={len(records)} p={p} S={cfg.sites}\n")
    for r in records:
        feats = ",".join(f"{v:.9g}" for v in r.features)
        buf.write(f"{r.id},{feats},{r.factors.phys:.9g},{r.factors.int:.9g},"
                  f"{r.factors.obs:.9g},{r.factors.ctx},{r.mortality},"
                  f"{r.sepsis},{r.readmission}\n")
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def load_cohort(path) -> tuple[list[CohortRecord], dict]:
    """Read a cohort file; returns (records, header meta dict)."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        parts = header.split()
        if len(parts) != 5 or parts[0] != "AURC" or parts[1] != "v1":
            raise ConfigError(f"bad cohort header: {header!r}")
        meta = {}
        for kv in parts[2:]:
            k, _, v = kv.partition("=")
            meta[k] = int(v)
        n, p = meta["n"], meta["p"]
        records = []
        for line in fh:
            cols = line.rstrip("\n").split(",")
            if len(cols) != 1 + p + 4 + 3:
                raise ConfigError(f"cohort row has {len(cols)} columns, expected {1 + p + 7}")
            rid = int(cols[0])
            feats = np.array([float(c) for c in cols[1:1 + p]])
            phys, intv, obs = (float(cols[1 + p]), float(cols[2 + p]), float(cols[3 + p]))
            ctx = int(cols[4 + p])
            records.append(CohortRecord(
                id=rid, features=feats,
                factors=FactorVector(phys=phys, int=intv, obs=obs, ctx=ctx),
                mortality=int(cols[5 + p]), sepsis=int(cols[6 + p]),
                readmission=int(cols[7 + p])))
    if len(records) != n:
        raise ConfigError(f"cohort file declares n={n} but has {len(records)} rows")
    return records, meta
