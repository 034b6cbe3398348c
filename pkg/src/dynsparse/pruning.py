"""Gradual magnitude pruning and the compute-matched small-dense baseline.

The pruning schedule follows the cubic ramp of automated gradual pruning:
sparsity rises from an initial to a final level between two epochs, with the
keep-mask re-derived from current weight magnitudes at each update and frozen
once the ramp ends. Pruning here is unstructured (per weight), so it is a
quality baseline, not a compute saving in these dense kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class PruneSchedule:
    initial_sparsity: float
    final_sparsity: float
    start_epoch: float
    end_epoch: float
    prune_frequency: int = 1  # epochs between mask updates

    def __post_init__(self):
        if not 0.0 <= self.initial_sparsity <= self.final_sparsity < 1.0:
            raise ValueError("need 0 <= initial <= final < 1")
        if self.start_epoch >= self.end_epoch:
            raise ValueError("start_epoch must precede end_epoch")
        if self.prune_frequency < 1:
            raise ValueError("prune_frequency must be >= 1")


def agp_target_sparsity(epoch, sched):
    """Cubic ramp from initial to final sparsity over [start, end] epochs."""
    span = sched.end_epoch - sched.start_epoch
    t = (epoch - sched.start_epoch) / span
    t = min(max(t, 0.0), 1.0)
    return sched.final_sparsity + (
        sched.initial_sparsity - sched.final_sparsity) * (1.0 - t) ** 3


def magnitude_prune(weights, target_sparsity):
    """Keep-mask that drops the floor(target * count) smallest-magnitude
    entries; ties break toward the lower flat index."""
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError(f"target sparsity must be in [0, 1), got {target_sparsity}")
    w = np.asarray(weights)
    flat = np.abs(w).ravel()
    n_prune = math.floor(target_sparsity * flat.size)
    mask = np.ones(flat.size, dtype=bool)
    if n_prune > 0:
        order = np.argsort(flat, kind="stable")
        mask[order[:n_prune]] = False
    return mask.reshape(w.shape)


class AgpPruner:
    """Applies the schedule to a set of PrunedLinear layers each epoch.

    Masks are re-derived during the ramp (weights may return) and frozen after
    the end epoch.
    """

    def __init__(self, layers, sched):
        self.layers = list(layers)
        self.sched = sched
        self.applied = 0.0
        self._frozen = False
        self._last_update = None

    def current_sparsity(self):
        """Most recently applied target level (0 before the ramp starts)."""
        return self.applied

    def on_epoch(self, epoch):
        if self._frozen or epoch < self.sched.start_epoch:
            return None
        due = (self._last_update is None
               or epoch - self._last_update >= self.sched.prune_frequency
               or epoch >= self.sched.end_epoch)  # always land on the final level
        if not due:
            return None
        target = agp_target_sparsity(epoch, self.sched)
        for layer in self.layers:
            layer.set_mask(magnitude_prune(layer.weight.data, target))
        self.applied = target
        self._last_update = epoch
        if epoch >= self.sched.end_epoch:
            self._frozen = True
        return target


def lstm_madds_per_step(hidden, embed=None, layers=2):
    """Multiply-adds per timestep in the recurrent weight matrices of a
    stacked LSTM (the matrices the dynamic gate would act on)."""
    if embed is None:
        embed = hidden
    total = 4 * hidden * embed + 4 * hidden * hidden  # first layer
    total += (layers - 1) * (4 * hidden * hidden + 4 * hidden * hidden)
    return total


def small_dense_config(base_hidden, target_fraction, madds_for_hidden=None):
    """Hidden size whose dense multiply-add count best matches
    target_fraction of the base model's, under the given count formula.

    The default formula is the stacked-LSTM ledger with the embedding tied to
    the hidden size.
    """
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError(f"target fraction must be in (0, 1], got {target_fraction}")
    if madds_for_hidden is None:
        madds_for_hidden = lstm_madds_per_step
    if target_fraction == 1.0:
        return base_hidden
    base = madds_for_hidden(base_hidden)
    best, best_err = 1, float("inf")
    for h in range(1, base_hidden + 1):
        err = abs(madds_for_hidden(h) / base - target_fraction)
        if err < best_err:
            best, best_err = h, err
    return best
