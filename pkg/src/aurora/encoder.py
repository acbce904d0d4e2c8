"""Shared MLP backbone with per-factor subspace heads.

The latent vector is the literal sum of K head outputs, all living in the
same d-dimensional space; that makes the cross-subspace penalty meaningful
(disjoint coordinate blocks would zero it by construction). Heads are linear
so each subspace stays an affine function of the shared hidden state.

Method-specific heads (decoder, projection, prototype head) hang off the same
bundle so every method trains the same backbone+heads core. The distillation
prototype head uses a small linear bottleneck, which keeps all four methods'
trainable parameter counts inside a +-10% band of each other.

Forward passes run through the autodiff Vars whether or not gradients are
needed, so training and frozen embedding use one code path.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor, Var
from .errors import ConfigError, ContractError, NumericError

METHODS = ("aurora", "mae", "contrastive", "distill")
_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}

CHECKPOINT_MAGIC = b"AURM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    latent: int = 32
    subspaces: int = 4
    activation: str = "relu"
    prototypes: int = 64  # distillation head output size


def validate_encoder(cfg: EncoderConfig) -> None:
    if cfg.subspaces < 2:
        raise ConfigError(f"need at least 2 subspaces, got {cfg.subspaces}")
    if cfg.latent < cfg.subspaces:
        raise ConfigError(f"latent dim {cfg.latent} must be >= subspace count {cfg.subspaces}")
    if not cfg.hidden:
        raise ConfigError("need at least one hidden layer")
    if cfg.activation != "relu":
        raise ConfigError(f"unsupported activation {cfg.activation!r}")
    if cfg.prototypes < 2:
        raise ConfigError(f"prototype count must be >= 2, got {cfg.prototypes}")


def bottleneck_dim(latent: int) -> int:
    # keeps the distill head within the cross-method parameter band
    return max(2, (3 * latent) // 8)


@dataclass(frozen=True)
class SubspaceEmbedding:
    """One record's latent: z plus its K additive components."""

    z: Tensor
    components: tuple[Tensor, ...]


@dataclass(frozen=True)
class BatchEmbedding:
    """Batched form: Z is (B, d), components are K matrices (B, d)."""

    z: object  # Tensor or Var
    components: tuple


@dataclass
class ModelBundle:
    """All parameters for one method, plus input normalization constants.

    ``params`` holds the trainable tensors; ``teacher`` (distillation only)
    mirrors the student shapes and is updated by EMA, never by gradients.
    """

    config: EncoderConfig
    method: str
    params: dict[str, Tensor]
    norm_mean: Tensor
    norm_std: Tensor
    teacher: dict[str, Tensor] | None = None
    extra: dict = field(default_factory=dict)


def init_bundle(cfg: EncoderConfig, method: str, rng: Rng) -> ModelBundle:
    """Seeded init: W ~ N(0, 1/fan_in), biases zero, fixed draw order."""
    validate_encoder(cfg)
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")

    params: dict[str, Tensor] = {}

    def linear(name, fan_in, fan_out):
        params[f"{name}/w"] = rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)
        params[f"{name}/b"] = np.zeros(fan_out)

    dims = (cfg.input_dim,) + cfg.hidden
    for i in range(len(cfg.hidden)):
        linear(f"backbone/{i}", dims[i], dims[i + 1])
    for k in range(cfg.subspaces):
        linear(f"head/{k}", cfg.hidden[-1], cfg.latent)
    if method == "mae":
        linear("decoder", cfg.latent, cfg.input_dim)
    elif method == "contrastive":
        linear("project", cfg.latent, cfg.latent)
    elif method == "distill":
        b = bottleneck_dim(cfg.latent)
        linear("proto/0", cfg.latent, b)
        linear("proto/1", b, cfg.prototypes)

    teacher = {k: v.copy() for k, v in params.items()} if method == "distill" else None
    return ModelBundle(config=cfg, method=method, params=params,
                       norm_mean=np.zeros(cfg.input_dim),
                       norm_std=np.ones(cfg.input_dim), teacher=teacher)


def set_normalization(bundle: ModelBundle, X: Tensor) -> None:
    """Record train-split feature mean/std; zero-variance columns keep std 1."""
    bundle.norm_mean = X.mean(axis=0)
    std = X.std(axis=0)
    bundle.norm_std = np.where(std > 0, std, 1.0)


def _as_vars(params: dict[str, Tensor]) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.items()}


def _forward(params, norm_mean, norm_std, X: Tensor) -> BatchEmbedding:
    Xn = (np.asarray(X, dtype=np.float64) - norm_mean) / norm_std
    if not np.all(np.isfinite(Xn)):
        raise NumericError("non-finite encoder input")
    u = ad.const(Xn)
    i = 0
    while f"backbone/{i}/w" in params:
        u = ad.relu(ad.add(ad.matmul(u, params[f"backbone/{i}/w"]),
                           params[f"backbone/{i}/b"]))
        i += 1
    comps = []
    k = 0
    while f"head/{k}/w" in params:
        comps.append(ad.add(ad.matmul(u, params[f"head/{k}/w"]), params[f"head/{k}/b"]))
        k += 1
    z = comps[0]
    for c in comps[1:]:
        z = ad.add(z, c)
    return BatchEmbedding(z=z, components=tuple(comps))


def encode_batch(bundle: ModelBundle, X: Tensor,
                 params: dict[str, Var] | None = None) -> BatchEmbedding:
    """Encode a (B, p) batch. Pass Var params to get a differentiable graph;
    otherwise plain float64 arrays come back."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != bundle.config.input_dim:
        raise ConfigError(f"expected (B, {bundle.config.input_dim}) input, got {X.shape}")
    if X.shape[0] < 1:
        raise ContractError("batch must contain at least one row")
    live = params is not None
    p = params if live else _as_vars(bundle.params)
    out = _forward(p, bundle.norm_mean, bundle.norm_std, X)
    if live:
        return out
    return BatchEmbedding(z=out.z.value, components=tuple(c.value for c in out.components))


def encode(bundle: ModelBundle, x: Tensor) -> SubspaceEmbedding:
    """Single-record encode; row form of encode_batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ConfigError(f"expected a flat feature vector, got shape {x.shape}")
    b = encode_batch(bundle, x[None, :])
    return SubspaceEmbedding(z=b.z[0], components=tuple(c[0] for c in b.components))


def _linear_head(params, prefix: str, Z):
    Zv = Z if isinstance(Z, Var) else ad.const(Z)
    w = params[f"{prefix}/w"]
    b = params[f"{prefix}/b"]
    if not isinstance(w, Var):
        w, b = ad.const(w), ad.const(b)
    return ad.add(ad.matmul(Zv, w), b)


def decode(params, Z):
    """MAE reconstruction head: latent -> feature space."""
    return _linear_head(params, "decoder", Z)


def project(params, Z):
    """Contrastive projection head."""
    return _linear_head(params, "project", Z)


def prototype_logits(params, Z):
    """Distillation head: linear bottleneck then prototype scores."""
    return _linear_head(params, "proto/1", _linear_head(params, "proto/0", Z))


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor],
               rate: float) -> dict[str, Tensor]:
    """teacher <- rate * teacher + (1 - rate) * student, elementwise."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"EMA rate must lie in [0, 1], got {rate}")
    if set(teacher) != set(student):
        raise ContractError("teacher and student parameter names differ")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ContractError(f"shape mismatch for {name!r}: {t.shape} vs {s.shape}")
        out[name] = rate * t + (1.0 - rate) * s
    return out


def trainable_count(bundle: ModelBundle) -> int:
    return int(sum(v.size for v in bundle.params.values()))


# --- checkpoint format AURM ---
# magic "AURM", version u16, entry count u32, then per entry:
#   name length u16, name utf-8, ndim u8, dims u32..., float64 payload;
# all little-endian, closed by a crc32 (u32) of every preceding byte.

def _pack_entry(name: str, arr: Tensor) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", data.ndim)
    head += b"".join(struct.pack("<I", d) for d in data.shape)
    return head + data.tobytes()


def save_checkpoint(bundle: ModelBundle, path) -> None:
    entries: list[tuple[str, Tensor]] = [
        ("meta/encoder", np.array([bundle.config.input_dim, bundle.config.latent,
                                   bundle.config.subspaces, bundle.config.prototypes,
                                   *bundle.config.hidden], dtype=np.float64)),
        ("meta/method", np.array([_METHOD_CODE[bundle.method]], dtype=np.float64)),
        ("norm/mean", bundle.norm_mean),
        ("norm/std", bundle.norm_std),
    ]
    entries += [(f"param/{k}", v) for k, v in bundle.params.items()]
    if bundle.teacher is not None:
        entries += [(f"teacher/{k}", v) for k, v in bundle.teacher.items()]

    body = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(entries))
    body += b"".join(_pack_entry(n, a) for n, a in entries)
    body += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(body)


def _read_entries(blob: bytes, magic: bytes, what: str):
    if len(blob) < 10 or blob[:4] != magic:
        raise ConfigError(f"not a {what} file (bad magic)")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise ConfigError(f"{what} checksum mismatch")
    version, count = struct.unpack("<HI", blob[4:10])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported {what} version {version}")
    off = 10
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        ndim = blob[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        entries[name] = arr.astype(np.float64).copy() if ndim else np.float64(arr[()])
    return entries


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    entries = _read_entries(blob, CHECKPOINT_MAGIC, "checkpoint")

    meta = entries.pop("meta/encoder")
    method = METHODS[int(entries.pop("meta/method")[0])]
    cfg = EncoderConfig(input_dim=int(meta[0]), latent=int(meta[1]),
                        subspaces=int(meta[2]), prototypes=int(meta[3]),
                        hidden=tuple(int(h) for h in meta[4:]))
    norm_mean = entries.pop("norm/mean")
    norm_std = entries.pop("norm/std")
    params = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
    teacher = {k[len("teacher/"):]: v for k, v in entries.items()
               if k.startswith("teacher/")}
    return ModelBundle(config=cfg, method=method, params=params,
                       norm_mean=norm_mean, norm_std=norm_std,
                       teacher=teacher or None)
