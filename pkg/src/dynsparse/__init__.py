"""Block-wise dynamic sparseness for matrix-vector products.

A trainable gating network looks at (part of) each input vector and picks
which blocks of a weight matrix participate in the product; the rest are
skipped entirely. The package bundles the tape-based autodiff engine the
layers are built on, the experiment models (image classifier, LSTM language
model), static-pruning and small-dense baselines, training loops, and
gate-usage analytics.
"""

from .autodiff import NonFiniteError, ShapeError, Tape, Tensor
from .blocksparse import (BlockMatrix, ComputeLedger, comput_fraction,
                          gated_matmul, gated_matvec)
from .gating import (GateMask, GateMaskBatch, GatingNetwork, SoftmaxGateConfig,
                     SparsenessConfig, hard_threshold, round_half_up,
                     softmax_sum_gate, topk_gate, topk_gate_cols)
from .layers import DenseLinear, DynamicLinear, PrunedLinear
from .models import (LstmCell, LstmLm, LstmLmConfig, LstmState, MlpConfig,
                     SparseMlp, gating_extra_params, model_comput_fraction,
                     parameter_count)
from .pruning import (AgpPruner, PruneSchedule, agp_target_sparsity,
                      lstm_madds_per_step, magnitude_prune, small_dense_config)
from .training import (Adam, EpochReport, OptimConfig, SgdMomentum,
                       SparsityRamp, batchify, bptt_segments, fit_classifier,
                       fit_lm, make_optimizer, perplexity, ramp_value)
from .analysis import (ClassHeatmap, GateUsageStats, categorize_gates,
                       class_heatmap, collect_gate_stats,
                       input_dependent_fraction, within_between_similarity)
from .data import (CorpusError, IdxCountMismatchError, IdxError, IdxMagicError,
                   IdxTruncatedError, Vocab, build_vocab, load_mnist,
                   load_text_corpus, read_idx)
from .checkpoint import (CheckpointError, load_checkpoint, load_model,
                         save_checkpoint, save_model)
from .config import ConfigError, RunConfig, resolve_config

__version__ = "0.1.0"

__all__ = [
    "Adam", "AgpPruner", "BlockMatrix", "CheckpointError", "ClassHeatmap",
    "ComputeLedger", "ConfigError", "CorpusError", "DenseLinear",
    "DynamicLinear", "EpochReport", "GateMask", "GateMaskBatch",
    "GateUsageStats", "GatingNetwork", "IdxCountMismatchError", "IdxError",
    "IdxMagicError", "IdxTruncatedError", "LstmCell", "LstmLm", "LstmLmConfig",
    "LstmState", "MlpConfig", "NonFiniteError", "OptimConfig", "PruneSchedule",
    "PrunedLinear", "RunConfig", "SgdMomentum", "ShapeError",
    "SoftmaxGateConfig", "SparseMlp", "SparsenessConfig", "SparsityRamp",
    "Tape", "Tensor", "Vocab", "agp_target_sparsity", "batchify",
    "bptt_segments", "build_vocab", "categorize_gates", "class_heatmap",
    "collect_gate_stats", "comput_fraction", "fit_classifier", "fit_lm",
    "gated_matmul", "gated_matvec", "gating_extra_params", "hard_threshold",
    "input_dependent_fraction", "load_checkpoint", "load_mnist", "load_model",
    "load_text_corpus", "lstm_madds_per_step", "magnitude_prune",
    "make_optimizer", "model_comput_fraction", "parameter_count", "perplexity",
    "ramp_value", "read_idx", "resolve_config", "round_half_up",
    "save_checkpoint", "save_model", "small_dense_config", "softmax_sum_gate",
    "topk_gate", "topk_gate_cols", "within_between_similarity",
]
