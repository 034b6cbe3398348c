"""Gate-behavior analytics.

Answers two questions about a trained model: which gates are effectively
static (open or closed for almost every input) versus input-dependent, and
whether instances of the same class select similar block patterns.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .gating import hard_threshold


@dataclass
class GateUsageStats:
    """Per-layer open frequencies over an evaluation set.

    ``layer_frequencies[i][u]`` is the fraction of observed instances for
    which gate ``u`` of gated layer ``i`` was strictly positive.
    """

    layer_frequencies: list
    instance_count: int


def _mask_opens(mask):
    """Boolean open matrix (units, instances) for a single or batched mask."""
    values = mask.values if hasattr(mask, "values") else mask
    opens = hard_threshold(values)
    return opens[:, None] if opens.ndim == 1 else opens


def collect_gate_stats(model, run_pass):
    """Observe every gate mask produced while ``run_pass()`` evaluates the
    model, and return open frequencies per gated layer.

    All gated layers must see the same number of instances, which holds for
    any straight-line forward pass.
    """
    layers = model.gated_layers()
    if not layers:
        raise ValueError("model has no gated layers to analyze")
    sums = [np.zeros(l.cfg.units) for l in layers]
    counts = [0] * len(layers)

    def observer(i):
        def observe(mask):
            opens = _mask_opens(mask)
            sums[i] += opens.sum(axis=1)
            counts[i] += opens.shape[1]
        return observe

    for i, layer in enumerate(layers):
        layer.mask_observer = observer(i)
    try:
        run_pass()
    finally:
        for layer in layers:
            layer.mask_observer = None
    if counts[0] == 0:
        raise ValueError("run_pass produced no gate activity")
    freqs = [s / c for s, c in zip(sums, counts)]
    return GateUsageStats(freqs, counts[0])


def categorize_gates(stats, threshold=0.95):
    """Partition each layer's gates into always-on (open frequency above the
    threshold), always-off (below 1-threshold), and input-dependent."""
    if stats.instance_count <= 0:
        raise ValueError("stats cover no instances")
    out = []
    for freq in stats.layer_frequencies:
        on = int(np.sum(freq > threshold))
        off = int(np.sum(freq < 1.0 - threshold))
        out.append({
            "always_on": on,
            "always_off": off,
            "input_dependent": len(freq) - on - off,
            "total": len(freq),
        })
    return out


def input_dependent_fraction(categories):
    dep = sum(c["input_dependent"] for c in categories)
    total = sum(c["total"] for c in categories)
    return dep / total


# ---------------------------------------------------------------------------
# per-class heatmaps

@dataclass
class ClassHeatmap:
    """Mean normalized gate value per block position, keyed by class label."""

    layer_index: int
    grid: tuple
    per_class: dict  # label -> (rows, cols) array
    counts: dict  # label -> instance count


def instance_masks(model, images, layer_index, batch_size=256):
    """Normalized mask value vectors (one row per instance) for a chosen
    gated layer of a classifier."""
    layer = model.gated_layers()[layer_index]
    rows = []

    def observe(mask):
        vals = mask.values.data
        rows.append(vals[None, :].copy() if vals.ndim == 1 else vals.T.copy())

    layer.mask_observer = observe
    try:
        for start in range(0, len(images), batch_size):
            model.forward_batch(Tensor(images[start:start + batch_size].T.copy()))
    finally:
        layer.mask_observer = None
    return np.concatenate(rows, axis=0)


def class_heatmap(model, images, labels, layer_index, num_classes=None,
                  batch_size=256):
    """Average each class's normalized mask values over all its instances.

    Classes with no instances are omitted with a warning.
    """
    labels = np.asarray(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    layer = model.gated_layers()[layer_index]
    r, c = layer.cfg.rows, layer.cfg.cols
    masks = instance_masks(model, images, layer_index, batch_size)
    per_class = {}
    counts = {}
    for label in range(num_classes):
        hit = labels == label
        n = int(hit.sum())
        if n == 0:
            warnings.warn(f"class {label} has no instances; omitted")
            continue
        per_class[label] = masks[hit].mean(axis=0).reshape(r, c)
        counts[label] = n
    return ClassHeatmap(layer_index, (r, c), per_class, counts)


def write_heatmap_csvs(heatmap, run_dir):
    """One CSV per class under <run>/<layer>/<class>.csv; rows and columns
    follow the block grid."""
    layer_dir = os.path.join(run_dir, f"layer{heatmap.layer_index}")
    os.makedirs(layer_dir, exist_ok=True)
    paths = []
    for label, grid in sorted(heatmap.per_class.items()):
        path = os.path.join(layer_dir, f"class{label}.csv")
        np.savetxt(path, grid, delimiter=",", fmt="%.10g")
        paths.append(path)
    return paths


def write_gate_summary(stats, categories, path):
    payload = {
        "instance_count": stats.instance_count,
        "layers": [dict(c, layer=i) for i, c in enumerate(categories)],
        "input_dependent_fraction": input_dependent_fraction(categories),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return payload


# ---------------------------------------------------------------------------
# mask similarity

def cosine_rows(a):
    """Row-normalize; zero rows stay zero."""
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return a / norms


def within_between_similarity(vectors, labels):
    """Mean pairwise cosine similarity among same-label rows versus
    different-label rows (diagonal excluded)."""
    labels = np.asarray(labels)
    v = cosine_rows(np.asarray(vectors, dtype=float))
    gram = v @ v.T
    same = labels[:, None] == labels[None, :]
    diff = ~same
    np.fill_diagonal(same, False)
    within = float(gram[same].mean())
    between = float(gram[diff].mean())
    return within, between
