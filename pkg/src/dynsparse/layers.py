"""Linear layers: dense, dynamically block-sparse, and statically pruned.

The dynamic layer wires a gating network in front of a BlockMatrix: on each
call it computes a gate mask from the input's key prefix, runs the gated
product over the open blocks only, and accumulates a compute ledger. The
bias, being O(m), is always dense.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocksparse import BlockMatrix, ComputeLedger, gated_matmul, gated_matvec
from .gating import GatingNetwork, SparsenessConfig, topk_gate, topk_gate_cols


class DenseLinear:
    """Plain y = W h + b layer."""

    def __init__(self, weight, bias=None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, out_dim, in_dim, rng, init="he", bias=True):
        if init == "he":
            std = np.sqrt(2.0 / in_dim)
            w = rng.normal(0.0, std, size=(out_dim, in_dim))
        elif init == "lm":
            w = rng.uniform(-0.05, 0.05, size=(out_dim, in_dim))
        else:
            raise ValueError(f"unknown init {init!r}")
        b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
        return cls(Tensor(w, requires_grad=True), b)

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    def forward(self, h):
        y = ad.matvec(self.weight, h)
        return ad.add(y, self.bias) if self.bias is not None else y

    def forward_batch(self, h):
        y = ad.matmul(self.weight, h)
        return ad.add_col(y, self.bias) if self.bias is not None else y

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def named_parameters(self, prefix=""):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def madds_per_input(self):
        return self.out_dim * self.in_dim


class DynamicLinear:
    """Block-sparse linear layer with an input-conditioned top-k gate.

    Gate scores come from the first ``key_size`` components of the input (or
    of an explicitly supplied key source, e.g. a pre-dropout activation).
    A running ledger accumulates multiply-adds across calls; ``fallback_count``
    tallies inputs that degenerated to the dense all-ones mask.
    """

    def __init__(self, weight, gate_net, cfg, bias=None):
        if weight.units != cfg.units:
            raise ad.ShapeError(
                f"block grid {weight.grid_rows}x{weight.grid_cols} does not "
                f"match gate config {cfg.rows}x{cfg.cols}")
        if cfg.key_size > weight.n:
            raise ValueError(f"key_size {cfg.key_size} exceeds input dim {weight.n}")
        self.weight = weight
        self.gate_net = gate_net
        self.cfg = cfg
        self.bias = bias
        self.ledger = ComputeLedger()
        self.fallback_count = 0
        self.last_mask = None
        self.mask_observer = None  # optional callback fed every mask produced

    @classmethod
    def create(cls, out_dim, in_dim, grid_rows, grid_cols, sparseness, rng,
               key_size=None, bias=True, init="he", gate_bias=0.1):
        if key_size is None:
            key_size = max(1, in_dim // 4)  # first quarter of the input
        cfg = SparsenessConfig(sparseness, grid_rows, grid_cols, key_size)
        if init == "he":
            std = np.sqrt(2.0 / in_dim)
            dense = rng.normal(0.0, std, size=(out_dim, in_dim))
        elif init == "lm":
            dense = rng.uniform(-0.05, 0.05, size=(out_dim, in_dim))
        else:
            raise ValueError(f"unknown init {init!r}")
        weight = BlockMatrix.from_dense(dense, grid_rows, grid_cols)
        net = GatingNetwork.create(cfg.units, key_size, rng,
                                   bias_value=gate_bias)
        b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
        return cls(weight, net, cfg, bias=b)

    @property
    def out_dim(self):
        return self.weight.m

    @property
    def in_dim(self):
        return self.weight.n

    def set_sparseness(self, sparseness):
        self.cfg = self.cfg.with_sparseness(sparseness)

    def gating_madds_per_call(self):
        return self.cfg.key_size * self.cfg.units

    def gating_aux_ops_per_call(self):
        # top-k selection comparisons plus normalization divisions
        return 2 * self.cfg.units

    def compute_mask(self, h, key_source=None):
        src = h if key_source is None else key_source
        h_key = ad.narrow(src, 0, self.cfg.key_size)
        return topk_gate(h_key, self.gate_net, self.cfg)

    def compute_mask_batch(self, h, key_source=None):
        src = h if key_source is None else key_source
        h_keys = ad.narrow(src, 0, self.cfg.key_size, axis=0)
        return topk_gate_cols(h_keys, self.gate_net, self.cfg)

    def forward_with_mask(self, h, mask, count_gating=True):
        """Gated product under an externally supplied mask (for shared gates)."""
        if mask.fallback:
            self.fallback_count += 1
        self.last_mask = mask
        if self.mask_observer is not None:
            self.mask_observer(mask)
        y, ledger = gated_matvec(self.weight, h, mask)
        if count_gating:
            ledger.add_gating_overhead(self.gating_madds_per_call(),
                                       self.gating_aux_ops_per_call())
        self.ledger.merge(ledger)
        return ad.add(y, self.bias) if self.bias is not None else y

    def forward_batch_with_mask(self, h, masks, count_gating=True):
        self.fallback_count += masks.fallback_count
        self.last_mask = masks
        if self.mask_observer is not None:
            self.mask_observer(masks)
        y, ledger = gated_matmul(self.weight, h, masks)
        if count_gating:
            batch = h.shape[1]
            ledger.add_gating_overhead(self.gating_madds_per_call() * batch,
                                       self.gating_aux_ops_per_call() * batch)
        self.ledger.merge(ledger)
        return ad.add_col(y, self.bias) if self.bias is not None else y

    def forward(self, h, key_source=None):
        return self.forward_with_mask(h, self.compute_mask(h, key_source))

    def forward_batch(self, h, key_source=None):
        return self.forward_batch_with_mask(h, self.compute_mask_batch(h, key_source))

    def parameters(self):
        out = [self.weight.param, self.gate_net.weight, self.gate_net.bias]
        if self.bias is not None:
            out.append(self.bias)
        return out

    def named_parameters(self, prefix=""):
        out = [(prefix + "blocks", self.weight.param),
               (prefix + "gate_weight", self.gate_net.weight),
               (prefix + "gate_bias", self.gate_net.bias)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def reset_ledger(self):
        self.ledger.reset()
        self.fallback_count = 0


class PrunedLinear:
    """Dense layer with a static keep-mask; masked weights act as zero and
    receive no gradient."""

    def __init__(self, weight, bias=None):
        self.weight = weight
        self.bias = bias
        self.mask = np.ones(weight.shape, dtype=bool)

    @classmethod
    def create(cls, out_dim, in_dim, rng, init="lm", bias=True):
        base = DenseLinear.create(out_dim, in_dim, rng, init=init, bias=bias)
        return cls(base.weight, base.bias)

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    def set_mask(self, mask):
        if mask.shape != self.weight.shape:
            raise ad.ShapeError("prune mask shape mismatch")
        self.mask = mask.astype(bool)

    def sparsity(self):
        return 1.0 - self.mask.mean()

    def _masked_weight(self):
        return ad.mul(self.weight, Tensor(self.mask.astype(float)))

    def forward(self, h):
        y = ad.matvec(self._masked_weight(), h)
        return ad.add(y, self.bias) if self.bias is not None else y

    def forward_batch(self, h):
        y = ad.matmul(self._masked_weight(), h)
        return ad.add_col(y, self.bias) if self.bias is not None else y

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def named_parameters(self, prefix=""):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out
