"""Command-line entry point.

Subcommands: train, eval, analyze-gates, heatmap, bench-flops,
prune-baseline. Every option is ``--key value``; the same keys can live in a
flat key=value config file passed with ``--config``, with command-line flags
taking precedence.
"""

from __future__ import annotations

import json
import os
import sys

import numpy as np

from . import analysis, checkpoint, data, training
from .autodiff import Tensor
from .config import (ConfigError, config_from_snapshot, config_snapshot,
                     require_paths, resolve_config)
from .gating import SparsenessConfig
from .layers import DynamicLinear
from .models import LstmLm, LstmLmConfig, MlpConfig, SparseMlp
from .pruning import AgpPruner, PruneSchedule, small_dense_config
from .training import SparsityRamp

COMMANDS = ("train", "eval", "analyze-gates", "heatmap", "bench-flops",
            "prune-baseline")

USAGE = """usage: dynsparse <command> [--config FILE] [--key value ...]

commands:
  train           train a model, writing metrics and a final checkpoint
  eval            evaluate a saved checkpoint
  analyze-gates   report always-on / always-off / input-dependent gate counts
  heatmap         write per-class block-usage CSVs for a classifier
  bench-flops     print the compute-fraction table for a gated layer
  prune-baseline  train the static magnitude-pruning baseline (lm task)

Any RunConfig field is accepted as --field value (dashes map to underscores).
"""


class UsageError(ValueError):
    pass


def parse_argv(argv):
    if not argv:
        raise UsageError("missing command")
    cmd = argv[0]
    if cmd not in COMMANDS:
        raise UsageError(f"unknown command {cmd!r}")
    config_file = None
    overrides = {}
    i = 1
    while i < len(argv):
        flag = argv[i]
        if not flag.startswith("--"):
            raise UsageError(f"expected a --flag, got {flag!r}")
        if i + 1 >= len(argv):
            raise UsageError(f"flag {flag} needs a value")
        key = flag[2:].replace("-", "_")
        value = argv[i + 1]
        i += 2
        if key == "config":
            config_file = value
        else:
            overrides[key] = value
    return cmd, config_file, overrides


# ---------------------------------------------------------------------------
# model construction

def make_ramp(cfg):
    """Sparseness schedule for dynamic mode: the configured linear ramp, or a
    constant level when no ramp is set."""
    if cfg.mode != "dynamic" or cfg.sparsity == 0:
        return None
    if cfg.ramp_end > cfg.ramp_start > 0:
        return SparsityRamp(cfg.ramp_start, cfg.ramp_end, cfg.sparsity)
    return SparsityRamp(-1.0, 0.0, cfg.sparsity)  # constant from epoch 1


def make_pruner(cfg, model):
    start = cfg.prune_start if cfg.prune_start > 0 else max(1, cfg.ramp_start)
    end = cfg.prune_end if cfg.prune_end > 0 else max(start + 1, cfg.ramp_end)
    sched = PruneSchedule(0.0, cfg.sparsity, start, end, cfg.prune_frequency)
    return AgpPruner(model.pruned_layers(), sched)


def matched_dense_width(cfg):
    """Hidden size for the small dense baseline, matched on the multiply-adds
    the ledger tracks for the corresponding dynamic model."""
    if cfg.task == "mnist":
        grid = cfg.hidden // cfg.block
        scfg = SparsenessConfig(cfg.sparsity, grid, grid, 1)
        frac = scfg.k / scfg.units
        in_dim, cls, n = cfg.input_dim, cfg.num_classes, cfg.layers

        def madds(width):
            return in_dim * width + n * width * width + cls * width

        base = cfg.hidden
        target = in_dim * base + n * frac * base * base + cls * base
        return small_dense_config(base, target / madds(base), madds)
    grid_r = 4 * cfg.hidden // cfg.block
    grid_c = cfg.hidden // cfg.block
    scfg = SparsenessConfig(cfg.sparsity, grid_r, grid_c, 1)
    return small_dense_config(cfg.hidden, scfg.k / scfg.units)


def build_mnist_model(cfg, rng):
    if cfg.mode == "static_agp":
        raise ConfigError("static_agp applies to the lm task only")
    width = cfg.hidden
    mode = "dynamic" if cfg.mode == "dynamic" else "dense"
    block = cfg.block
    if mode == "dense":
        if cfg.mode == "small_dense":
            width = matched_dense_width(cfg)
        block = 1  # grid unused for dense layers
    key_size = max(1, int(round(width * cfg.resolved_key_fraction())))
    mlp_cfg = MlpConfig(
        input_dim=cfg.input_dim, num_classes=cfg.num_classes, width=width,
        hidden_layers=cfg.layers, block_edge=block, sparseness=cfg.sparsity,
        key_size=min(key_size, width))
    return SparseMlp(mlp_cfg, rng, mode=mode)


def build_lm_model(cfg, vocab_size, rng):
    hidden = cfg.hidden
    embed = cfg.resolved_embed()
    layer_mode = {"dense": "dense", "dynamic": "dynamic",
                  "static_agp": "static", "small_dense": "dense"}[cfg.mode]
    if cfg.mode == "small_dense":
        hidden = matched_dense_width(cfg)
        embed = hidden
    lm_cfg = LstmLmConfig(
        vocab_size=vocab_size, embed_dim=embed, hidden_dim=hidden,
        num_layers=cfg.layers, dropout=cfg.dropout, block_edge=cfg.block,
        sparseness=cfg.sparsity if cfg.mode == "dynamic" else 0.0,
        key_fraction=cfg.resolved_key_fraction(), layer_mode=layer_mode,
        shared_gates=cfg.shared_gates, gate_bias=cfg.gate_bias)
    return LstmLm(lm_cfg, rng)


def _optim_config(cfg):
    return training.OptimConfig(
        kind=cfg.resolved_optimizer(), lr=cfg.resolved_lr(),
        momentum=cfg.momentum, clip_norm=cfg.resolved_clip_norm())


# ---------------------------------------------------------------------------
# train

def _load_mnist_splits(cfg):
    require_paths(cfg, ("train_images", "train_labels",
                        "test_images", "test_labels"))
    train = data.load_mnist(cfg.train_images, cfg.train_labels)
    test = data.load_mnist(cfg.test_images, cfg.test_labels)
    return train, test


def _write_metrics(cfg, lines):
    payload = ("".join(line + "\n" for line in lines)).encode("utf-8")
    checkpoint.atomic_write_bytes(os.path.join(cfg.out_dir, "metrics.jsonl"),
                                  payload)


def cmd_train(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    lines = []

    def sink(report):
        line = report.to_json()
        lines.append(line)
        print(line)

    snapshot = config_snapshot(cfg)
    if cfg.task == "mnist":
        (train_x, train_y), (test_x, test_y) = _load_mnist_splits(cfg)
        model = build_mnist_model(cfg, rng)
        training.fit_classifier(model, train_x, train_y, test_x, test_y,
                                _optim_config(cfg), cfg.epochs, cfg.batch_size,
                                make_ramp(cfg), rng, sink=sink)
    else:
        require_paths(cfg, ("train_text", "valid_text"))
        train_ids, vocab = data.load_text_corpus(cfg.train_text)
        valid_ids, _ = data.load_text_corpus(cfg.valid_text, vocab)
        train_stream = training.batchify(train_ids, cfg.batch_size)
        valid_stream = training.batchify(valid_ids, cfg.batch_size)
        model = build_lm_model(cfg, len(vocab), rng)
        pruner = make_pruner(cfg, model) if cfg.mode == "static_agp" else None
        training.fit_lm(model, train_stream, valid_stream, _optim_config(cfg),
                        cfg.epochs, cfg.seg_len, make_ramp(cfg), rng,
                        sink=sink, pruner=pruner)
        snapshot["vocab_size"] = len(vocab)
    checkpoint.save_model(os.path.join(cfg.out_dir, "model.bdsp"), model,
                          snapshot)
    _write_metrics(cfg, lines)
    return 0


# ---------------------------------------------------------------------------
# checkpoint-consuming commands

def _checkpoint_path(cfg):
    path = cfg.checkpoint or os.path.join(cfg.out_dir, "model.bdsp")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def _restore(config_file, overrides):
    """Rebuild the trained model: saved config, with current flags layered on
    top (so data paths can be redirected at eval time)."""
    invoked = resolve_config(config_file, overrides)
    path = _checkpoint_path(invoked)
    tensors, snapshot = checkpoint.load_checkpoint(path)
    cfg = config_from_snapshot(snapshot)
    merged_overrides = dict(overrides)
    merged_overrides.setdefault("checkpoint", path)
    raw = {k: str(v) for k, v in config_snapshot(cfg).items()}
    raw.update({k: v for k, v in _file_values(config_file).items()})
    raw.update(merged_overrides)
    cfg = resolve_config(None, raw)
    rng = np.random.default_rng(cfg.seed)
    if cfg.task == "mnist":
        model = build_mnist_model(cfg, rng)
        vocab = None
    else:
        require_paths(cfg, ("train_text",))
        _, vocab = data.load_text_corpus(cfg.train_text)
        stored = snapshot.get("vocab_size")
        if stored is not None and stored != len(vocab):
            raise checkpoint.CheckpointError(
                f"vocabulary size {len(vocab)} does not match checkpoint "
                f"({stored}); was the training corpus changed?")
        model = build_lm_model(cfg, len(vocab), rng)
    checkpoint.load_model(path, model)
    return cfg, model, vocab


def _file_values(config_file):
    from .config import parse_config_file
    return parse_config_file(config_file) if config_file else {}


def cmd_eval(config_file, overrides):
    cfg, model, vocab = _restore(config_file, overrides)
    sparsity = cfg.sparsity if cfg.mode == "dynamic" else 0.0
    if cfg.task == "mnist":
        require_paths(cfg, ("test_images", "test_labels"))
        images, labels = data.load_mnist(cfg.test_images, cfg.test_labels)
        report = training.evaluate_classifier(model, images, labels,
                                              cfg.epochs, sparsity)
    else:
        text_key = "test_text" if cfg.test_text else "valid_text"
        require_paths(cfg, (text_key,))
        ids, _ = data.load_text_corpus(getattr(cfg, text_key), vocab)
        stream = training.batchify(ids, cfg.batch_size)
        report = training.evaluate_lm(model, stream, cfg.epochs, sparsity,
                                      cfg.seg_len, split=text_key[:-5])
    print(report.to_json())
    return 0


def cmd_analyze_gates(config_file, overrides):
    cfg, model, vocab = _restore(config_file, overrides)
    if not model.gated_layers():
        raise ConfigError("model has no gated layers to analyze")
    sparsity = cfg.sparsity if cfg.mode == "dynamic" else 0.0
    if cfg.task == "mnist":
        require_paths(cfg, ("test_images", "test_labels"))
        images, labels = data.load_mnist(cfg.test_images, cfg.test_labels)

        def run_pass():
            training.evaluate_classifier(model, images, labels, cfg.epochs,
                                         sparsity)
    else:
        text_key = "test_text" if cfg.test_text else "valid_text"
        require_paths(cfg, (text_key,))
        ids, _ = data.load_text_corpus(getattr(cfg, text_key), vocab)
        stream = training.batchify(ids, cfg.batch_size)

        def run_pass():
            training.evaluate_lm(model, stream, cfg.epochs, sparsity,
                                 cfg.seg_len)

    stats = analysis.collect_gate_stats(model, run_pass)
    categories = analysis.categorize_gates(stats)
    os.makedirs(cfg.out_dir, exist_ok=True)
    payload = analysis.write_gate_summary(
        stats, categories, os.path.join(cfg.out_dir, "gates.json"))
    print(json.dumps(payload))
    return 0


def cmd_heatmap(config_file, overrides):
    cfg, model, _ = _restore(config_file, overrides)
    if cfg.task != "mnist":
        raise ConfigError("heatmap requires a classifier (task = mnist)")
    if not model.gated_layers():
        raise ConfigError("model has no gated layers")
    require_paths(cfg, ("test_images", "test_labels"))
    images, labels = data.load_mnist(cfg.test_images, cfg.test_labels)
    model.set_sparseness(cfg.sparsity)
    index = cfg.layer_index
    if index < 0:
        index = len(model.gated_layers()) - 1
    heatmap = analysis.class_heatmap(model, images, labels, index,
                                     num_classes=cfg.num_classes)
    out = os.path.join(cfg.out_dir, "heatmaps")
    paths = analysis.write_heatmap_csvs(heatmap, out)
    print(json.dumps({"layer": index, "files": paths}))
    return 0


# ---------------------------------------------------------------------------
# bench-flops

DEFAULT_SWEEP = (0.5, 0.6, 0.8, 0.9)


def flops_table(hidden, block, sparsities, key_fraction=0.25, trials=25,
                seed=0):
    """Measured and arithmetic compute fractions for a square gated layer.

    Each row reports the top-k matvec fraction, the gating overhead relative
    to the dense product, their total, plus the ledger-measured fraction over
    random inputs and how many of those calls fell back to dense.
    """
    if hidden % block != 0:
        raise ConfigError(f"hidden {hidden} not divisible by block {block}")
    grid = hidden // block
    key_size = max(1, int(round(hidden * key_fraction)))
    rows = []
    for sparsity in sparsities:
        try:
            scfg = SparsenessConfig(sparsity, grid, grid, key_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        matvec_fraction = scfg.k * block * block / (hidden * hidden)
        overhead = key_size * scfg.units / (hidden * hidden)
        rng = np.random.default_rng(seed)
        layer = DynamicLinear.create(hidden, hidden, grid, grid, sparsity,
                                     rng, key_size=key_size, bias=False)
        for _ in range(trials):
            layer.forward(Tensor(rng.standard_normal(hidden)))
        ledger = layer.ledger
        rows.append({
            "sparsity": sparsity,
            "k": scfg.k,
            "matvec_fraction": matvec_fraction,
            "gating_overhead": overhead,
            "total_fraction": matvec_fraction + overhead,
            "measured_fraction": ledger.actual_madds / ledger.dense_madds,
            "fallbacks": layer.fallback_count,
        })
    return rows


def cmd_bench_flops(cfg, explicit):
    sweep = [cfg.sparsity] if "sparsity" in explicit else list(DEFAULT_SWEEP)
    kf = cfg.key_fraction if cfg.key_fraction > 0 else 0.25
    rows = flops_table(cfg.hidden, cfg.block, sweep, key_fraction=kf,
                       seed=cfg.seed)
    header = (f"{'sparsity':>9} {'k':>5} {'matvec':>9} {'gating':>9} "
              f"{'total':>9} {'measured':>9} {'fallbacks':>9}")
    print(header)
    for row in rows:
        print(f"{row['sparsity']:>9.3f} {row['k']:>5d} "
              f"{row['matvec_fraction']:>9.4f} {row['gating_overhead']:>9.4f} "
              f"{row['total_fraction']:>9.4f} {row['measured_fraction']:>9.4f} "
              f"{row['fallbacks']:>9d}")
    return 0


# ---------------------------------------------------------------------------
# dispatch

def cli_dispatch(argv):
    try:
        cmd, config_file, overrides = parse_argv(argv)
        if cmd == "train":
            return cmd_train(resolve_config(config_file, overrides))
        if cmd == "prune-baseline":
            forced = dict(overrides)
            forced["task"] = "lm"
            forced["mode"] = "static_agp"
            return cmd_train(resolve_config(config_file, forced))
        if cmd == "eval":
            return cmd_eval(config_file, overrides)
        if cmd == "analyze-gates":
            return cmd_analyze_gates(config_file, overrides)
        if cmd == "heatmap":
            return cmd_heatmap(config_file, overrides)
        if cmd == "bench-flops":
            cfg = resolve_config(config_file, overrides)
            explicit = set(overrides) | set(_file_values(config_file))
            return cmd_bench_flops(cfg, explicit)
        raise UsageError(f"unhandled command {cmd!r}")
    except (UsageError, ConfigError, data.IdxError, data.CorpusError,
            checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(USAGE, file=sys.stderr)
        return 2


def main(argv=None):
    return cli_dispatch(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
