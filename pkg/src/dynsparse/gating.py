"""Input-conditioned gate masks over a block grid.

The primary gate scores every block with a single ReLU feed-forward layer,
keeps the top k scores, and normalizes the surviving coefficients so the mean
over the whole grid is one. A softmax-sum variant produces dense masks that
concentrate onto k entries as its temperature is annealed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SOFTMAX_GATE_MAX_UNITS = 256


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass
class SparsenessConfig:
    """Sparseness level and block-grid geometry for one gated matrix.

    ``key_size`` is the length of the input prefix fed to the gating network.
    """

    sparseness: float
    rows: int
    cols: int
    key_size: int

    def __post_init__(self):
        if not 0.0 <= self.sparseness < 1.0:
            raise ValueError(f"sparseness must be in [0, 1), got {self.sparseness}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")
        if self.key_size < 1:
            raise ValueError("key_size must be positive")
        self.k  # validate at construction

    @property
    def units(self):
        return self.rows * self.cols

    @property
    def k(self):
        """Number of open gates: (1 - sparseness) * units, rounded to nearest."""
        k = round_half_up((1.0 - self.sparseness) * self.units)
        if k < 1:
            raise ValueError(
                f"sparseness {self.sparseness} on a {self.rows}x{self.cols} grid "
                "leaves zero open gates")
        return min(k, self.units)

    def with_sparseness(self, sparseness):
        return SparsenessConfig(sparseness, self.rows, self.cols, self.key_size)


@dataclass
class SoftmaxGateConfig:
    """Temperature schedule for the softmax-sum gate."""

    k: int
    temperature: float
    final_temperature: float = None
    decay: float = 1.0  # multiplicative factor per epoch

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.final_temperature is None:
            self.final_temperature = self.temperature
        if self.final_temperature <= 0.0:
            raise ValueError("final temperature must be positive")

    def at_epoch(self, epoch):
        t = self.temperature * self.decay ** epoch
        return max(t, self.final_temperature)


class GatingNetwork:
    """Single-layer scorer mapping a key vector to one score per block."""

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias
        if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
            raise ad.ShapeError("gating network weight/bias shapes disagree")

    @classmethod
    def create(cls, units, key_size, rng, bias_value=0.1):
        """Uniform(-1/sqrt(key), +1/sqrt(key)) weights, slightly positive bias
        so ReLU scores start mostly active rather than all-dead."""
        bound = 1.0 / math.sqrt(key_size)
        w = Tensor(rng.uniform(-bound, bound, size=(units, key_size)), requires_grad=True)
        b = Tensor(np.full(units, bias_value), requires_grad=True)
        return cls(w, b)

    @property
    def units(self):
        return self.weight.shape[0]

    @property
    def key_size(self):
        return self.weight.shape[1]

    def scores(self, h_key):
        """relu(W @ h_key + b), the top-k gate's score vector."""
        return ad.relu(ad.add(ad.matvec(self.weight, h_key), self.bias))

    def scores_cols(self, h_keys):
        """Column-batched scores for h_keys of shape (key_size, B)."""
        return ad.relu(ad.add_col(ad.matmul(self.weight, h_keys), self.bias))

    def linear_scores(self, h_key):
        """W @ h_key + b without the ReLU; used by the softmax-sum gate."""
        return ad.add(ad.matvec(self.weight, h_key), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class GateMask:
    """Per-input gate coefficients over the block grid.

    ``values`` has exactly ``open_count`` nonzero entries and mean 1 over the
    grid, except when ``fallback`` is set, in which case it is all ones.
    """

    values: Tensor
    open_count: int
    fallback: bool = False


@dataclass
class GateMaskBatch:
    """Column-stacked gate masks for a batch; column j gates input j."""

    values: Tensor  # (units, B)
    open_counts: np.ndarray
    fallback_cols: np.ndarray = field(default=None)

    @property
    def fallback_count(self):
        return 0 if self.fallback_cols is None else int(self.fallback_cols.sum())

    def column(self, j):
        vals = self.values.data[:, j]
        fb = bool(self.fallback_cols[j]) if self.fallback_cols is not None else False
        return GateMask(Tensor(vals), int(self.open_counts[j]), fb)


def topk_gate(h_key, net, cfg):
    """Top-k gate mask of the scored blocks, normalized to grid mean 1.

    Keeps the k largest ReLU scores (ties toward the lower flat index) and
    divides by the mean of the k-sparse vector taken over all grid positions,
    so gradients reach the scorer both through the surviving scores and
    through the normalization denominator.

    When fewer than k scores are strictly positive the selection is degenerate
    (it would open blocks with zero coefficient), so the gate falls back to a
    dense all-ones mask and flags it; callers count these.
    """
    if net.units != cfg.units:
        raise ad.ShapeError(
            f"gating network has {net.units} outputs for a {cfg.units}-block grid")
    k = cfg.k
    scores = net.scores(h_key)
    if int(np.count_nonzero(scores.data > 0.0)) < k:
        return GateMask(Tensor(np.ones(cfg.units)), cfg.units, fallback=True)
    sparse = ad.keep_topk(scores, k)
    mask = ad.div(sparse, ad.mean(sparse))
    return GateMask(mask, k)


def topk_gate_cols(h_keys, net, cfg):
    """Column-batched ``topk_gate``; one mask per column of h_keys."""
    if net.units != cfg.units:
        raise ad.ShapeError(
            f"gating network has {net.units} outputs for a {cfg.units}-block grid")
    k = cfg.k
    units = cfg.units
    scores = net.scores_cols(h_keys)
    fb = (scores.data > 0.0).sum(axis=0) < k
    ok = ~fb
    sparse = ad.keep_topk_cols(scores, k)
    means = ad.col_mean(sparse)
    # fallback columns divide by 1 and are then overwritten with ones
    divisor = ad.add(ad.mul(means, Tensor(ok.astype(float))), Tensor(fb.astype(float)))
    normalized = ad.div_cols(sparse, divisor)
    if fb.any():
        keep = Tensor(np.repeat(ok[None, :].astype(float), units, axis=0))
        ones_fb = Tensor(np.repeat(fb[None, :].astype(float), units, axis=0))
        values = ad.add(ad.mul(normalized, keep), ones_fb)
    else:
        values = normalized
    open_counts = np.where(fb, units, k)
    return GateMaskBatch(values, open_counts, fb)


def softmax_sum_gate(h_key, nets, sparseness, temperature):
    """Dense gate mask from a sum of per-slot softmaxes (one scorer per open
    gate), scaled so the grid mean is exactly 1.

    Differentiable everywhere; at low temperature each softmax peaks on a
    single block, concentrating the mass onto at most len(nets) entries.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not nets:
        raise ValueError("softmax_sum_gate needs at least one scorer")
    units = nets[0].units
    k = len(nets)
    expected = round_half_up((1.0 - sparseness) * units)
    if expected != k:
        raise ValueError(
            f"{k} scorers inconsistent with sparseness {sparseness} on {units} gates "
            f"(expected {expected})")
    if units > SOFTMAX_GATE_MAX_UNITS:
        warnings.warn(
            f"softmax-sum gating over {units} gates; this variant is only "
            "practical at small scale", RuntimeWarning)
    total = None
    for net in nets:
        if net.units != units:
            raise ad.ShapeError("softmax-sum scorers disagree on grid size")
        part = ad.softmax(net.linear_scores(h_key), temperature)
        total = part if total is None else ad.add(total, part)
    # each softmax sums to 1, so scaling by units/k pins the mean at 1;
    # this equals the 1/(1 - sparseness) factor whenever k is consistent
    mask = ad.scale(total, units / k)
    return GateMask(mask, units)


def hard_threshold(mask, eps=0.0):
    """Boolean open/closed decision per gate: value strictly above eps."""
    if eps < 0.0:
        raise ValueError(f"threshold must be non-negative, got {eps}")
    values = mask.values if isinstance(mask, GateMask) else mask
    return values.data > eps
