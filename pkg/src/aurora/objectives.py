"""Training objectives: the orthogonal relational-alignment loss and baselines.

The headline loss is alignment (kernel-weighted squared distances between
related records, per subspace) plus a cross-subspace orthogonality penalty.
Alignment alone is minimized by a constant embedding, so a variance guard --
a hinge on per-dimension batch standard deviation, absent from the headline
objective -- is added with weight mu; mu=0 recovers the unguarded objective
for the collapse ablation.

Baselines: masked reconstruction, InfoNCE on fresh-noise views, and
teacher-student distillation with centering and temperature sharpening.
Everything differentiable runs through the autodiff Vars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Var
from .encoder import decode, encode_batch
from .errors import ConfigError, ContractError, NumericError

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class AuroraLossConfig:
    """lam weights orthogonality, mu the collapse guard (artifact addition).

    lam=0 is allowed only so the ablations can switch the penalty off; the
    objective as published assumes lam > 0.
    """

    lam: float = 0.1
    mu: float = 1.0
    align_weights: tuple[float, ...] | None = None
    orth_mode: str = "per_sample"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.mu < 0:
            raise ConfigError(f"mu must be nonnegative, got {self.mu}")
        if self.orth_mode not in ("per_sample", "batch_gram"):
            raise ConfigError(f"unknown orth_mode {self.orth_mode!r}")


@dataclass
class ObjectiveReport:
    """Loss components for one step; ``node`` carries the differentiable total."""

    align: list[float]
    orth: float
    guard: float
    total: float
    empty_factors: tuple[int, ...] = ()
    node: Var | None = None


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def align_loss(Zk, pairs) -> Var:
    """Weighted mean of ||Z_k[i] - Z_k[j]||^2 over sampled pairs.

    ``pairs`` is an (i, j, w) triple of arrays (one factor's slice of a
    PairBatch). Empty pairs contribute 0; callers flag that in the report.
    """
    Zk = _as_var(Zk)
    i, j, w = pairs
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    if i.size == 0:
        return ad.const(0.0)
    if i.size != j.size or i.size != w.size:
        raise ContractError("pair arrays must have equal length")
    diff = ad.sub(ad.gather_rows(Zk, i), ad.gather_rows(Zk, j))
    sq = ad.sum_rows(ad.mul(diff, diff))
    return ad.vmean(ad.mul(sq, ad.const(w)))


def orth_loss(components, mode: str = "per_sample") -> Var:
    """Cross-subspace overlap penalty, summed over ordered pairs k != l.

    per_sample: batch mean of squared per-sample dot products (the vector
    reading of the overlap formula). batch_gram: squared Frobenius norm of
    the cross Gram matrix, scaled by 1/B^2.
    """
    comps = [_as_var(c) for c in components]
    shape = comps[0].shape
    if len(shape) != 2:
        raise ContractError(f"components must be (B, d) matrices, got {shape}")
    for c in comps:
        if c.shape != shape:
            raise ContractError(f"component shape mismatch: {c.shape} vs {shape}")
    B = shape[0]

    total = ad.const(0.0)
    for a in range(len(comps)):
        for b in range(a + 1, len(comps)):
            if mode == "per_sample":
                dots = ad.sum_rows(ad.mul(comps[a], comps[b]))
                total = ad.add(total, ad.vsum(ad.mul(dots, dots)))
            elif mode == "batch_gram":
                gram = ad.matmul(ad.transpose(comps[a]), comps[b])
                total = ad.add(total, ad.vsum(ad.mul(gram, gram)))
            else:
                raise ConfigError(f"unknown orth_mode {mode!r}")
    scale = 2.0 / B if mode == "per_sample" else 2.0 / (B * B)
    return ad.mul(total, ad.const(scale))


def variance_guard(components) -> Var:
    """Hinge on per-dimension batch std: sum_k sum_j max(0, 1 - std)^2.

    Zero exactly when every dimension of every component spreads to std >= 1;
    this is what keeps the alignment loss away from its constant-embedding
    minimizer.
    """
    comps = [_as_var(c) for c in components]
    if len(comps[0].shape) != 2 or comps[0].shape[0] < 2:
        raise ContractError("variance guard needs a batch of at least 2 rows")
    total = ad.const(0.0)
    for c in comps:
        mu = ad.mean_axis0(c)
        cen = ad.sub(c, mu)
        var = ad.mean_axis0(ad.mul(cen, cen))
        h = ad.relu(ad.sub(ad.const(1.0), ad.sqrt(var)))
        total = ad.add(total, ad.vsum(ad.mul(h, h)))
    return total


def aurora_loss(cfg: AuroraLossConfig, components, pair_batch) -> ObjectiveReport:
    """Total objective: sum_k w_k * align_k + lam * orth + mu * guard."""
    comps = [_as_var(c) for c in components]
    K = len(comps)
    weights = cfg.align_weights if cfg.align_weights is not None else (1.0,) * K
    if len(weights) != K:
        raise ConfigError(f"need {K} alignment weights, got {len(weights)}")

    align_nodes = [align_loss(comps[k], pair_batch.for_factor(k)) for k in range(K)]
    empty = tuple(k for k in range(K) if pair_batch.for_factor(k)[0].size == 0)
    orth = orth_loss(comps, cfg.orth_mode)
    guard = variance_guard(comps)

    total = ad.const(0.0)
    for w, a in zip(weights, align_nodes):
        total = ad.add(total, ad.mul(a, ad.const(float(w))))
    total = ad.add(total, ad.mul(orth, ad.const(cfg.lam)))
    total = ad.add(total, ad.mul(guard, ad.const(cfg.mu)))

    return ObjectiveReport(
        align=[float(a.value) for a in align_nodes],
        orth=float(orth.value),
        guard=float(guard.value),
        total=float(total.value),
        empty_factors=empty,
        node=total,
    )


def mae_loss(bundle, X, mask_fraction: float, rng: Rng,
             params: dict[str, Var] | None = None) -> Var:
    """Masked reconstruction: zero out coordinates, encode, decode, MSE on
    the masked coordinates only. The mask is resampled until at least one
    coordinate is masked, so the mean is always defined."""
    if not 0.0 < mask_fraction < 1.0:
        raise ConfigError(f"mask fraction must lie in (0, 1), got {mask_fraction}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"expected a (B, p) batch, got shape {X.shape}")
    mask = rng.random(X.shape) < mask_fraction
    while not mask.any():
        mask = rng.random(X.shape) < mask_fraction

    p = params if params is not None else {k: Var(v) for k, v in bundle.params.items()}
    emb = encode_batch(bundle, X * ~mask, params=p)
    xhat = decode(p, emb.z)
    diff = ad.mul(ad.sub(xhat, ad.const(X)), ad.const(mask.astype(np.float64)))
    return ad.mul(ad.vsum(ad.mul(diff, diff)), ad.const(1.0 / mask.sum()))


def infonce_loss(anchors, positives, temperature: float) -> Var:
    """Mean cross-entropy of matching each anchor to its own positive among
    the batch's positives, with cosine similarity at the given temperature."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    A = _as_var(anchors)
    P = _as_var(positives)
    if len(A.shape) != 2 or A.shape != P.shape:
        raise ContractError(f"anchors/positives must be equal (B, d), got {A.shape} vs {P.shape}")
    B = A.shape[0]
    if B < 2:
        raise ContractError("InfoNCE needs a batch of at least 2")

    def normalize(M):
        norms = ad.sqrt(ad.sum_rows(ad.mul(M, M)))
        if np.any(norms.value < NORM_FLOOR):
            raise NumericError("zero-norm embedding row in InfoNCE")
        return ad.scale_rows(M, ad.reciprocal(norms))

    sims = ad.matmul(normalize(A), ad.transpose(normalize(P)))
    logits = ad.mul(sims, ad.const(1.0 / temperature))
    logp = ad.log_softmax_rows(logits)
    eye = np.eye(B)
    return ad.mul(ad.vsum(ad.mul(logp, ad.const(eye))), ad.const(-1.0 / B))


def distill_loss(student_logits, teacher_logits, student_temp: float,
                 teacher_temp: float, center) -> Var:
    """Cross-entropy from centered, sharpened teacher to student.

    The teacher side is a constant: no gradient ever flows into
    ``teacher_logits``. ``center`` is the running center maintained by
    ``update_center``.
    """
    if student_temp <= 0 or teacher_temp <= 0:
        raise ContractError("temperatures must be positive")
    S = _as_var(student_logits)
    T = teacher_logits.value if isinstance(teacher_logits, Var) else np.asarray(
        teacher_logits, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if len(S.shape) != 2 or T.shape != S.shape or center.shape != (S.shape[1],):
        raise ContractError(
            f"logit shapes disagree: student {S.shape}, teacher {T.shape}, center {center.shape}")

    t = (T - center) / teacher_temp
    t = t - t.max(axis=1, keepdims=True)
    probs = np.exp(t)
    probs /= probs.sum(axis=1, keepdims=True)

    logp = ad.log_softmax_rows(ad.mul(S, ad.const(1.0 / student_temp)))
    B = S.shape[0]
    return ad.mul(ad.vsum(ad.mul(logp, ad.const(probs))), ad.const(-1.0 / B))


def update_center(center, teacher_logits, rate: float = 0.9) -> np.ndarray:
    """EMA of the teacher batch mean used for centering."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"center rate must lie in [0, 1], got {rate}")
    T = teacher_logits.value if isinstance(teacher_logits, Var) else np.asarray(
        teacher_logits, dtype=np.float64)
    return rate * np.asarray(center, dtype=np.float64) + (1.0 - rate) * T.mean(axis=0)
