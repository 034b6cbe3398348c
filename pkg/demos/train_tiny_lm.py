"""Gated versus dense LSTM language models on the bundled corpus.

Under a minute on a laptop CPU. Trains the same small LSTM twice: once
dense and once with every recurrent weight matrix gated at sparseness 0.5,
then compares validation perplexity and inspects which gates turned out
input-dependent.

Equivalent command lines:
    dynsparse train --task lm --mode dense   --train-text data/tinytext/train.txt ...
    dynsparse train --task lm --mode dynamic --sparsity 0.5 ...
    dynsparse analyze-gates --out-dir runs/latest ...
"""

import numpy as np

from dynsparse.analysis import (categorize_gates, collect_gate_stats,
                                input_dependent_fraction)
from dynsparse.data import load_text_corpus
from dynsparse.models import LstmLm, LstmLmConfig
from dynsparse.training import (OptimConfig, SparsityRamp, batchify, evaluate_lm,
                                fit_lm)

train_ids, vocab = load_text_corpus("data/tinytext/train.txt")
valid_ids, _ = load_text_corpus("data/tinytext/valid.txt", vocab)
train_stream = batchify(train_ids, 64)
valid_stream = batchify(valid_ids, 64)
print(f"{len(train_ids)} training tokens, vocabulary {len(vocab)}")


def make_model(mode, sparseness):
    cfg = LstmLmConfig(vocab_size=len(vocab), embed_dim=64, hidden_dim=64,
                       num_layers=2, dropout=0.2, block_edge=32,
                       sparseness=sparseness, key_fraction=0.25,
                       layer_mode=mode, gate_bias=0.5)
    return LstmLm(cfg, np.random.default_rng(0))


def train(model, sparseness, epochs=3):
    ramp = SparsityRamp(-1.0, 0.0, sparseness) if sparseness else None
    reports = fit_lm(
        model, train_stream, valid_stream,
        OptimConfig(kind="adam", lr=1e-3, clip_norm=5.0),
        epochs=epochs, seg_len=35, ramp=ramp, rng=np.random.default_rng(1),
        sink=lambda r: print(f"  epoch {r.epoch} {r.split:5s} "
                             f"ppl {r.ppl_or_acc:7.2f} "
                             f"compute {r.comput_fraction:.3f}"))
    return [r for r in reports if r.split == "valid"][-1]

print("\ndense baseline:")
dense = train(make_model("dense", 0.0), 0.0)

print("\ngated, half the blocks closed per step:")
model = make_model("dynamic", 0.5)
gated = train(model, 0.5)

print(f"\nvalidation perplexity: dense {dense.ppl_or_acc:.2f}, "
      f"gated {gated.ppl_or_acc:.2f} at "
      f"{gated.comput_fraction:.1%} of the dense recurrent multiply-adds")

# Which gates actually vary with the input? A gate open for >95% of inputs
# is effectively always-on; open for <5% is effectively dead.
stats = collect_gate_stats(
    model, lambda: evaluate_lm(model, valid_stream, 3, 0.5, 35))
categories = categorize_gates(stats)
for i, cat in enumerate(categories):
    print(f"  matrix {i}: {cat['always_on']} always on, "
          f"{cat['always_off']} always off, "
          f"{cat['input_dependent']} input-dependent of {cat['total']}")
print(f"input-dependent fraction: {input_dependent_fraction(categories):.1%}")
