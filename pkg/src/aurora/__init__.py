"""Orthogonal contextual subspace representation learning.

A numpy toolkit for training a latent decomposition z = sum_k z^(k) with
per-factor relational alignment and a cross-subspace orthogonality penalty,
alongside masked-reconstruction, contrastive and self-distillation baselines,
on synthetic patient cohorts whose ground-truth factors make every latent
geometry metric exactly checkable.
"""

from .autodiff import (OptimizerState, Rng, Tensor, Var, backward, grad_check,
                       grad_of, gradients, optimizer_step)
from .cohort import (FACTORS, CohortConfig, CohortRecord, FactorVector, ShiftSpec,
                     apply_shift, context_features, generate, load_cohort,
                     save_cohort)
from .encoder import (EncoderConfig, ModelBundle, SubspaceEmbedding, encode,
                      encode_batch, ema_update, init_bundle, load_checkpoint,
                      save_checkpoint)
from .errors import (AuroraError, ConfigError, ContractError, DimensionError,
                     NumericError)
from .harness import (EmbeddingStore, ExperimentConfig, default_config, embed,
                      evaluate, load_config, load_store, parse_config, run_grid,
                      save_store, train)
from .metrics import (EmbeddingSet, MetricsTable, auroc, context_entropy,
                      context_retrieval, linear_probe, mi_overlap,
                      neighborhood_purity, orthogonality_score, recall_at_k,
                      shift_gap)
from .objectives import (AuroraLossConfig, ObjectiveReport, align_loss,
                         aurora_loss, distill_loss, infonce_loss, mae_loss,
                         orth_loss, variance_guard)
from .relations import (PairBatch, RelationGraph, build_graph, build_graphs,
                        kernel_weight, sample_pairs)

__version__ = "0.1.0"
