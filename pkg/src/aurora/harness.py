"""Experiment harness: config files, training, embedding stores, grid runs.

Config files are flat ``key = value`` text with ``#`` comments and dotted
keys, chosen for diffability. The seed must be set explicitly; nothing in a
run draws from ambient entropy. All training randomness comes from Philox
streams keyed by (seed, tag); the tag constants below partition the space so
cohort generation, init, shuffling, masking and view noise never collide.

A grid run trains every method from the same seed on the same cohort,
evaluates frozen embeddings on the held-out split (last 20% of ids), scores
the fitted mortality probe on a shifted copy of the test range, and emits a
metrics CSV plus a markdown report. Grid cells are independent; the
AURORA_THREADS environment variable caps the worker count (default 1).
"""

from __future__ import annotations

import io
import os
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Rng, Var, grad_of, optimizer_step
from .cohort import (FACTORS, CohortConfig, ShiftSpec, apply_shift, factor_arrays,
                     feature_matrix, fresh_view, generate, label_array,
                     oracle_score)
from .encoder import (METHODS, EncoderConfig, ModelBundle, encode_batch, ema_update,
                      init_bundle, project, prototype_logits, set_normalization,
                      trainable_count, validate_encoder)
from .errors import ConfigError, ContractError, NumericError
from .metrics import (MetricsTable, auroc, context_entropy, context_retrieval,
                      fit_logistic, mi_overlap, neighborhood_purity,
                      orthogonality_score, outcome_quartile_relevance, pca2d,
                      recall_at_k, shift_gap)
from .objectives import (AuroraLossConfig, aurora_loss, distill_loss, infonce_loss,
                         mae_loss, update_center)
from .relations import build_graphs, sample_pairs

TRAIN_TAG = 2 ** 62
INIT_TAG = TRAIN_TAG + 1
SHUFFLE_TAG = TRAIN_TAG + (1 << 32)
MASK_TAG = TRAIN_TAG + (2 << 32)
VIEW_TAG = TRAIN_TAG + (3 << 32)

TRAIN_FRACTION = 0.8
MIN_TEST_SPLIT = 500

STORE_MAGIC = b"AURE"
STORE_VERSION = 1

PROBE_TARGETS = ("mortality", "sepsis", "readmission")


# --- configuration ---

@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    epochs: int = 40
    batch: int = 256


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.1
    mu: float = 1.0
    orth_mode: str = "per_sample"
    align_weights: tuple[float, ...] | None = None
    temperature: float = 0.2
    mask_fraction: float = 0.5
    ema_rate: float = 0.99
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_rate: float = 0.9


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    probe_targets: tuple[str, ...] = PROBE_TARGETS


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    method: str = "aurora"
    cohort: CohortConfig = None
    shift: ShiftSpec = ShiftSpec(int_policy_delta=-1.0, obs_scale=2.0,
                                 site_remap=(1, 2, 3, 0))
    encoder: EncoderConfig = None
    objective: ObjectiveConfig = ObjectiveConfig()
    optimizer: OptimConfig = OptimConfig()
    graph_m: int = 10

    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        if self.cohort is None:
            object.__setattr__(self, "cohort", CohortConfig(n=5000, seed=self.seed))
        if self.encoder is None:
            object.__setattr__(self, "encoder", EncoderConfig(input_dim=self.cohort.p))


def default_config(seed: int, **overrides) -> ExperimentConfig:
    return replace(ExperimentConfig(seed=seed), **overrides)


def validate_experiment(cfg: ExperimentConfig) -> None:
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}")
    if cfg.optimizer.kind not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer kind {cfg.optimizer.kind!r}")
    if cfg.optimizer.lr < 0 or cfg.optimizer.epochs < 0 or cfg.optimizer.batch < 2:
        raise ConfigError("optimizer requires lr >= 0, epochs >= 0, batch >= 2")
    if cfg.encoder.input_dim != cfg.cohort.p:
        raise ConfigError(f"encoder input dim {cfg.encoder.input_dim} does not match "
                          f"cohort feature dim {cfg.cohort.p}")
    if cfg.graph_m < 1:
        raise ConfigError("graph neighbor count must be >= 1")
    for t in cfg.eval.probe_targets:
        if t not in PROBE_TARGETS:
            raise ConfigError(f"unknown probe target {t!r}")
    validate_encoder(cfg.encoder)
    AuroraLossConfig(lam=cfg.objective.lam, mu=cfg.objective.mu,
                     orth_mode=cfg.objective.orth_mode,
                     align_weights=cfg.objective.align_weights)


_INT = ("seed", "cohort.n", "cohort.p", "cohort.sites", "cohort.seed",
        "encoder.latent", "encoder.subspaces", "encoder.prototypes",
        "optimizer.epochs", "optimizer.batch", "graph.m", "eval.k")
_FLOAT = ("cohort.rho", "cohort.noise", "shift.int_policy_delta",
          "shift.obs_scale", "objective.lambda", "objective.mu",
          "objective.temperature", "objective.mask_fraction",
          "objective.ema_rate", "objective.student_temp",
          "objective.teacher_temp", "objective.center_rate", "optimizer.lr")
_STR = ("method", "objective.orth_mode", "optimizer.kind")
_LIST_INT = ("encoder.hidden", "shift.site_remap")
_LIST_FLOAT = ("objective.align_weights",)
_LIST_STR = ("eval.probe_targets",)


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat `key = value` config text into an ExperimentConfig."""
    raw: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            if key in _INT:
                raw[key] = int(value)
            elif key in _FLOAT:
                raw[key] = float(value)
            elif key in _STR:
                raw[key] = value
            elif key in _LIST_INT:
                raw[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif key in _LIST_FLOAT:
                raw[key] = tuple(float(v) for v in value.split(",") if v.strip())
            elif key in _LIST_STR:
                raw[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc

    if "seed" not in raw:
        raise ConfigError("config must set `seed` explicitly")
    seed = raw.pop("seed")

    def take(prefix, cls, rename=None, **extra):
        rename = rename or {}
        kwargs = dict(extra)
        for key in list(raw):
            if key.startswith(prefix + "."):
                name = key[len(prefix) + 1:]
                kwargs[rename.get(name, name)] = raw.pop(key)
        return cls(**kwargs)

    cohort_kw = {"seed": seed, "n": 5000}
    cohort = take("cohort", CohortConfig, **cohort_kw)
    shift_defaults = ExperimentConfig(seed=seed).shift
    shift = take("shift", ShiftSpec,
                 int_policy_delta=shift_defaults.int_policy_delta,
                 obs_scale=shift_defaults.obs_scale,
                 site_remap=shift_defaults.site_remap)
    encoder = take("encoder", EncoderConfig, input_dim=cohort.p)
    objective = take("objective", ObjectiveConfig, rename={"lambda": "lam"})
    optimizer = take("optimizer", OptimConfig)
    graph_m = raw.pop("graph.m", 10)
    eval_cfg = take("eval", EvalConfig)
    method = raw.pop("method", "aurora")

    cfg = ExperimentConfig(seed=seed, method=method, cohort=cohort, shift=shift,
                           encoder=encoder, objective=objective,
                           optimizer=optimizer, graph_m=graph_m, eval=eval_cfg)
    validate_experiment(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# --- training ---

class TrainingDiverged(NumericError):
    """Raised when a loss goes non-finite; carries the last finite state."""

    def __init__(self, message, bundle: ModelBundle, log: list[dict]):
        super().__init__(message)
        self.bundle = bundle
        self.log = log


LOG_COLUMNS = ("epoch", "align_phys", "align_int", "align_obs", "align_ctx",
               "orth", "guard", "total", "wall_time")


def log_to_csv(log: list[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in log:
        lines.append(",".join(
            (str(row[c]) if c == "epoch" else f"{row.get(c, 0.0):.9g}")
            for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def train_split(records) -> tuple[list, list]:
    """Deterministic split by record id: first 80% train, last 20% test."""
    ordered = sorted(records, key=lambda r: r.id)
    cut = int(len(ordered) * TRAIN_FRACTION)
    return ordered[:cut], ordered[cut:]


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[dict]
    records: list = field(default_factory=list, repr=False)


def train(cfg: ExperimentConfig, records=None) -> TrainResult:
    """Run the configured objective; bitwise deterministic given the config.

    ``records`` may carry a pre-generated cohort for the same config to avoid
    regenerating it across grid cells.
    """
    validate_experiment(cfg)
    if records is None:
        records = generate(replace(cfg.cohort, seed=cfg.seed, shift=None))
    train_recs, _ = train_split(records)
    n_train = len(train_recs)
    if n_train < 2:
        raise ConfigError("training split needs at least 2 records")

    X = feature_matrix(train_recs)
    bundle = init_bundle(cfg.encoder, cfg.method, Rng(cfg.seed, INIT_TAG))
    set_normalization(bundle, X)

    graphs = None
    if cfg.method == "aurora":
        graphs = build_graphs(train_recs, min(cfg.graph_m, n_train - 1))
    loss_cfg = AuroraLossConfig(lam=cfg.objective.lam, mu=cfg.objective.mu,
                                orth_mode=cfg.objective.orth_mode,
                                align_weights=cfg.objective.align_weights)
    opt = OptimizerState(kind=cfg.optimizer.kind, lr=cfg.optimizer.lr)
    center = np.zeros(cfg.encoder.prototypes)
    in_domain = replace(cfg.cohort, seed=cfg.seed, shift=None)

    log: list[dict] = []
    K = cfg.encoder.subspaces
    align_cols = [f"align_{f}" for f in FACTORS[:K]]

    for epoch in range(cfg.optimizer.epochs):
        t0 = time.perf_counter()
        perm = Rng(cfg.seed, SHUFFLE_TAG + epoch).permutation(n_train)
        mask_rng = Rng(cfg.seed, MASK_TAG + epoch)
        view_rng = Rng(cfg.seed, VIEW_TAG + epoch)
        sums: dict[str, float] = {}
        steps = 0

        for start in range(0, n_train, cfg.optimizer.batch):
            batch_idx = perm[start:start + cfg.optimizer.batch]
            if batch_idx.size < 2:
                continue
            Xb = X[batch_idx]
            pvars = {k: Var(v) for k, v in bundle.params.items()}
            parts: dict[str, float] = {}

            try:
                if cfg.method == "aurora":
                    emb = encode_batch(bundle, Xb, params=pvars)
                    pairs = sample_pairs(graphs, batch_idx)
                    report = aurora_loss(loss_cfg, emb.components, pairs)
                    loss = report.node
                    for name, val in zip(align_cols, report.align):
                        parts[name] = val
                    parts["orth"] = report.orth
                    parts["guard"] = report.guard
                elif cfg.method == "mae":
                    loss = mae_loss(bundle, Xb, cfg.objective.mask_fraction,
                                    mask_rng, params=pvars)
                elif cfg.method == "contrastive":
                    batch_recs = [train_recs[i] for i in batch_idx]
                    Xv = fresh_view(batch_recs, in_domain, view_rng)
                    za = encode_batch(bundle, Xb, params=pvars).z
                    zp = encode_batch(bundle, Xv, params=pvars).z
                    loss = infonce_loss(project(pvars, za), project(pvars, zp),
                                        cfg.objective.temperature)
                else:  # distill
                    batch_recs = [train_recs[i] for i in batch_idx]
                    Xv = fresh_view(batch_recs, in_domain, view_rng)
                    zs = encode_batch(bundle, Xv, params=pvars).z
                    s_logits = prototype_logits(pvars, zs)
                    t_bundle = replace_params(bundle, bundle.teacher)
                    zt = encode_batch(t_bundle, Xb)
                    t_logits = prototype_logits(bundle.teacher, zt.z).value
                    loss = distill_loss(s_logits, t_logits,
                                        cfg.objective.student_temp,
                                        cfg.objective.teacher_temp, center)
                    center = update_center(center, t_logits,
                                           cfg.objective.center_rate)

                parts["total"] = float(loss.value)
                ad.backward(loss)
                grads = {k: grad_of(v) for k, v in pvars.items()}
                bundle.params = optimizer_step(opt, bundle.params, grads)
            except NumericError as exc:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch}: {exc}", bundle, log) from exc

            if cfg.method == "distill":
                bundle.teacher = ema_update(bundle.teacher, bundle.params,
                                            cfg.objective.ema_rate)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1

        row = {"epoch": epoch, "wall_time": time.perf_counter() - t0}
        for k, v in sums.items():
            row[k] = v / max(steps, 1)
        log.append(row)

    return TrainResult(bundle=bundle, log=log, records=records)


def replace_params(bundle: ModelBundle, params: dict) -> ModelBundle:
    """Shallow view of a bundle with different parameter tensors."""
    return ModelBundle(config=bundle.config, method=bundle.method, params=params,
                       norm_mean=bundle.norm_mean, norm_std=bundle.norm_std)


# --- embedding store (AURE) ---
# header: magic "AURE", version u16, n u64, d u32, K u32; then per record:
#   id u64, z as d little-endian f32, then K components of d f32 each;
# closed by a crc32 (u32) over every preceding byte.

@dataclass(frozen=True)
class EmbeddingStore:
    ids: np.ndarray  # (n,) uint64
    z: np.ndarray  # (n, d) float32
    components: tuple[np.ndarray, ...]  # K x (n, d) float32


def embed(bundle: ModelBundle, records) -> EmbeddingStore:
    """Deterministic frozen forward pass over all records."""
    p = records[0].features.shape[0]
    if p != bundle.config.input_dim:
        raise ConfigError(f"checkpoint expects {bundle.config.input_dim} features, "
                          f"cohort has {p}")
    X = feature_matrix(records)
    zs, comps = [], None
    for start in range(0, X.shape[0], 1024):
        out = encode_batch(bundle, X[start:start + 1024])
        zs.append(out.z.astype("<f4"))
        cs = [c.astype("<f4") for c in out.components]
        comps = cs if comps is None else [np.concatenate([a, b])
                                          for a, b in zip(comps, cs)]
    return EmbeddingStore(
        ids=np.array([r.id for r in records], dtype=np.uint64),
        z=np.concatenate(zs), components=tuple(comps))


def save_store(store: EmbeddingStore, path) -> None:
    n, d = store.z.shape
    K = len(store.components)
    body = STORE_MAGIC + struct.pack("<HQII", STORE_VERSION, n, d, K)
    chunks = [body]
    for i in range(n):
        chunks.append(struct.pack("<Q", int(store.ids[i])))
        chunks.append(np.ascontiguousarray(store.z[i], dtype="<f4").tobytes())
        for c in store.components:
            chunks.append(np.ascontiguousarray(c[i], dtype="<f4").tobytes())
    blob = b"".join(chunks)
    blob += struct.pack("<I", zlib.crc32(blob))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_store(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 22 or blob[:4] != STORE_MAGIC:
        raise ConfigError("not an embedding store (bad magic)")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise ConfigError("embedding store checksum mismatch")
    version, n, d, K = struct.unpack("<HQII", blob[4:22])
    if version != STORE_VERSION:
        raise ConfigError(f"unsupported store version {version}")
    ids = np.empty(n, dtype=np.uint64)
    z = np.empty((n, d), dtype=np.float32)
    comps = [np.empty((n, d), dtype=np.float32) for _ in range(K)]
    off = 22
    rec = 8 + 4 * d * (K + 1)
    if len(blob) != 22 + n * rec + 4:
        raise ConfigError("embedding store is truncated")
    for i in range(n):
        (ids[i],) = struct.unpack_from("<Q", blob, off)
        off += 8
        z[i] = np.frombuffer(blob, dtype="<f4", count=d, offset=off)
        off += 4 * d
        for c in comps:
            c[i] = np.frombuffer(blob, dtype="<f4", count=d, offset=off)
            off += 4 * d
    return EmbeddingStore(ids=ids, z=z, components=tuple(comps))


# --- evaluation ---

@dataclass
class FittedProbe:
    w: np.ndarray
    b: float
    mean: np.ndarray
    std: np.ndarray
    converged: bool

    def score(self, Z: np.ndarray) -> np.ndarray:
        return (np.asarray(Z, dtype=np.float64) - self.mean) / self.std @ self.w + self.b


def _store_split(store: EmbeddingStore, records):
    order = np.argsort(store.ids, kind="stable")
    ids = store.ids[order]
    rec_ids = np.array(sorted(r.id for r in records), dtype=np.uint64)
    if ids.shape != rec_ids.shape or not np.array_equal(ids, rec_ids):
        raise ContractError("store ids do not align with the cohort")
    z = store.z[order].astype(np.float64)
    comps = [c[order].astype(np.float64) for c in store.components]
    cut = int(len(records) * TRAIN_FRACTION)
    return z, comps, cut


def evaluate(store: EmbeddingStore, records, cfg: ExperimentConfig,
             split: str = "test", method: str | None = None) -> MetricsTable:
    """Full metric vocabulary on the held-out split (last 20% of ids)."""
    table, _ = evaluate_with_probes(store, records, cfg, split=split, method=method)
    return table


def evaluate_with_probes(store: EmbeddingStore, records, cfg: ExperimentConfig,
                         split: str = "test", method: str | None = None):
    method = method or cfg.method
    recs = sorted(records, key=lambda r: r.id)
    z, comps, cut = _store_split(store, recs)
    if len(recs) - cut < MIN_TEST_SPLIT:
        raise ConfigError(f"held-out split has {len(recs) - cut} records, "
                          f"needs >= {MIN_TEST_SPLIT}")
    test_recs = recs[cut:]
    z_tr, z_te = z[:cut], z[cut:]
    comps_te = [c[cut:] for c in comps]
    factors = factor_arrays(test_recs)

    table = MetricsTable()
    probes: dict[str, FittedProbe] = {}
    for target in cfg.eval.probe_targets:
        y_tr = label_array(recs[:cut], target)
        y_te = label_array(test_recs, target)
        probe = FittedProbe(*fit_logistic(z_tr, y_tr))
        probes[target] = probe
        table.add(f"{target}_auroc", split, method, auroc(probe.score(z_te), y_te))

    rel = outcome_quartile_relevance(label_array(test_recs, "mortality"),
                                     factors["phys"])
    table.add(f"recall_at_{cfg.eval.k}", split, method,
              recall_at_k(z_te, z_te, rel, cfg.eval.k, exclude_self=True))
    table.add("mi_overlap", split, method, mi_overlap(comps_te, factors))
    table.add("orthogonality_score", split, method, orthogonality_score(comps_te))
    table.add("context_retrieval", split, method,
              context_retrieval(comps_te, factors, cfg.eval.k))
    table.add("neighborhood_purity", split, method,
              neighborhood_purity(z_te, factors, cfg.eval.k))
    table.add("context_entropy", split, method,
              context_entropy(z_te, factors, cfg.eval.k))
    return table, probes


def bayes_ceiling(records, target: str = "mortality") -> float:
    """Factor-oracle AUROC on the given records: the probe's upper reference."""
    return auroc(oracle_score(records, target), label_array(records, target))


def subspace_stds(store: EmbeddingStore) -> np.ndarray:
    """Mean per-dimension std of each subspace component; collapse indicator."""
    return np.array([c.astype(np.float64).std(axis=0).mean()
                     for c in store.components])


# --- parameter budget parity ---

def parameter_counts(cfg: ExperimentConfig) -> dict[str, int]:
    rng_tag = Rng(cfg.seed, INIT_TAG)
    return {m: trainable_count(init_bundle(cfg.encoder, m, rng_tag))
            for m in METHODS}


def check_parameter_parity(counts: dict[str, int], tol: float = 0.10) -> None:
    """Every method's trainable count within +-tol of every other's."""
    vals = list(counts.values())
    for a in vals:
        for b in vals:
            if abs(a - b) > tol * b:
                raise ContractError(
                    f"parameter budgets diverge beyond {tol:.0%}: {counts}")


# --- grid runs ---

GRID_METHODS = ("mae", "contrastive", "distill", "aurora")


@dataclass
class GridResult:
    table: MetricsTable
    report: str
    per_seed: list[MetricsTable]


def _grid_cell(cfg: ExperimentConfig, method: str, records, shifted_records):
    cell_cfg = replace(cfg, method=method)
    result = train(cell_cfg, records=records)
    store = embed(result.bundle, records)
    table, probes = evaluate_with_probes(store, records, cell_cfg)

    _, test_recs = train_split(shifted_records)
    shifted_store = embed(result.bundle, test_recs)
    y = label_array(test_recs, "mortality")
    score = probes["mortality"].score(shifted_store.z.astype(np.float64))
    table.add("mortality_auroc", "shifted", method, auroc(score, y))
    return table


def run_grid(cfg: ExperimentConfig, methods=GRID_METHODS,
             seeds: tuple[int, ...] | None = None) -> GridResult:
    """Train methods x {in-domain, shifted} and assemble the report."""
    validate_experiment(cfg)
    if "mortality" not in cfg.eval.probe_targets:
        raise ConfigError("grid evaluation requires the mortality probe target")
    seeds = tuple(seeds) if seeds else (cfg.seed,)
    workers = max(1, int(os.environ.get("AURORA_THREADS", "1")))

    counts = parameter_counts(cfg)
    check_parameter_parity(counts)

    per_seed: list[MetricsTable] = []
    for seed in seeds:
        scfg = replace(cfg, seed=seed, cohort=replace(cfg.cohort, seed=seed))
        in_cfg = replace(scfg.cohort, shift=None)
        records = generate(in_cfg)
        shifted_records = generate(apply_shift(in_cfg, scfg.shift))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_grid_cell, scfg, m, records, shifted_records)
                           for m in methods]
                tables = [f.result() for f in futures]
        else:
            tables = [_grid_cell(scfg, m, records, shifted_records) for m in methods]

        merged = MetricsTable()
        for t in tables:
            merged.rows.extend(t.rows)
        for m, gap in shift_gap(merged, merged).items():
            merged.add("shift_gap", "shift", m, gap)

        _, test_recs = train_split(records)
        merged.add("bayes_ceiling", "test", "factor_oracle",
                   bayes_ceiling(test_recs, "mortality"))
        for m, c in counts.items():
            merged.add("param_count", "train", m, float(c))
        per_seed.append(merged)

    agg = _aggregate(per_seed)
    report = render_report(cfg, methods, per_seed, agg, counts, seeds)
    return GridResult(table=agg, report=report, per_seed=per_seed)


def _aggregate(tables: list[MetricsTable]) -> MetricsTable:
    """Mean across seeds, preserving first-seen row order."""
    order: list[tuple[str, str, str]] = []
    acc: dict[tuple[str, str, str], list[float]] = {}
    for t in tables:
        for m, s, me, v in t.rows:
            key = (m, s, me)
            if key not in acc:
                acc[key] = []
                order.append(key)
            acc[key].append(v)
    out = MetricsTable()
    for key in order:
        out.add(*key, float(np.mean(acc[key])))
    return out


def _cell_text(values: list[float], decimals: int = 3) -> str:
    if len(values) == 1:
        return f"{values[0]:.{decimals}f}"
    return f"{np.mean(values):.{decimals}f} ± {np.std(values):.{decimals}f}"


def render_report(cfg, methods, per_seed, agg, counts, seeds) -> str:
    """Markdown report mirroring the four-table evaluation layout."""

    def collect(metric, split, method):
        return [t.value(metric, split, method) for t in per_seed
                if t.has(metric, split, method)]

    buf = io.StringIO()
    c = cfg.cohort
    buf.write("# Synthetic cohort representation grid\n\n")
    buf.write(f"Cohort: n={c.n}, p={c.p}, sites={c.sites}, rho={c.rho}, "
              f"noise={c.noise}. Latent d={cfg.encoder.latent}, "
              f"K={cfg.encoder.subspaces}. Seeds: {', '.join(str(s) for s in seeds)}.\n\n")
    buf.write(f"Shift spec: intervention delta {cfg.shift.int_policy_delta}, "
              f"observation scale {cfg.shift.obs_scale}, "
              f"site remap {cfg.shift.site_remap}.\n\n")

    k = cfg.eval.k
    buf.write("## Prediction (frozen embeddings, linear probes)\n\n")
    buf.write(f"| Method | Mortality AUROC | Sepsis AUROC | Readmission AUROC "
              f"| Retrieval Recall@{k} |\n|---|---|---|---|---|\n")
    for m in methods:
        cells = [_cell_text(collect(f"{t}_auroc", "test", m))
                 for t in ("mortality", "sepsis", "readmission")]
        cells.append(_cell_text(collect(f"recall_at_{k}", "test", m)))
        buf.write(f"| {m} | " + " | ".join(cells) + " |\n")
    ceiling = _cell_text(collect("bayes_ceiling", "test", "factor_oracle"))
    buf.write(f"\nFactor-oracle mortality AUROC (test split): {ceiling}\n\n")

    buf.write("## Contextual disentanglement\n\n")
    buf.write("| Method | MI Overlap | Orthogonality Score | Context Retrieval |\n"
              "|---|---|---|---|\n")
    for m in methods:
        cells = [_cell_text(collect(name, "test", m))
                 for name in ("mi_overlap", "orthogonality_score", "context_retrieval")]
        buf.write(f"| {m} | " + " | ".join(cells) + " |\n")

    buf.write("\n## Robustness under contextual shift\n\n")
    buf.write("| Method | In-Domain AUROC | Shifted AUROC | Gap |\n|---|---|---|---|\n")
    for m in methods:
        cells = [_cell_text(collect("mortality_auroc", "test", m)),
                 _cell_text(collect("mortality_auroc", "shifted", m)),
                 _cell_text(collect("shift_gap", "shift", m))]
        buf.write(f"| {m} | " + " | ".join(cells) + " |\n")

    buf.write("\n## Latent geometry\n\n")
    buf.write("| Method | Neighborhood Purity | Context Entropy |\n|---|---|---|\n")
    for m in methods:
        cells = [_cell_text(collect("neighborhood_purity", "test", m)),
                 _cell_text(collect("context_entropy", "test", m))]
        buf.write(f"| {m} | " + " | ".join(cells) + " |\n")

    buf.write("\n## Parameter budget\n\n")
    mean = np.mean(list(counts.values()))
    for m in GRID_METHODS:
        dev = 100.0 * (counts[m] - mean) / mean
        buf.write(f"- {m}: {counts[m]} trainable scalars ({dev:+.1f}% vs mean)\n")
    buf.write("\nAll methods share the backbone and subspace heads; counts above "
              "stay within the ±10% parity band checked at run time.\n")
    return buf.getvalue()


def project_store_csv(store: EmbeddingStore) -> str:
    """2-D PCA coordinates of the full latent, as `id,pc1,pc2` CSV."""
    coords = pca2d(store.z.astype(np.float64))
    lines = ["id,pc1,pc2"]
    for i in range(store.ids.shape[0]):
        lines.append(f"{int(store.ids[i])},{coords[i, 0]:.6f},{coords[i, 1]:.6f}")
    return "\n".join(lines) + "\n"
