"""Generate the bundled tiny text corpus.

A seeded probabilistic grammar emits ~100k whitespace tokens of templated
sentences. Each sentence sticks to one topic, so a language model benefits
from conditioning on recent context; slot words are Zipf-weighted so the
frequency profile is vaguely natural. The output is split into train /
valid / test files, one sentence per line.

Usage:
    python3 tools/make_tiny_corpus.py --out data/tinytext \
        [--tokens 100000] [--seed 7]
"""

import argparse
import os

import numpy as np

TOPICS = {
    "harbor": {
        "nouns": ["boat", "sailor", "net", "gull", "tide", "dock", "rope",
                  "lantern", "crate", "anchor"],
        "verbs": ["moors", "drifts", "hauls", "mends", "watches", "loads",
                  "rides", "signals"],
        "adjs": ["salt", "grey", "heavy", "loose", "bright", "old"],
        "place": ["pier", "bay", "channel", "quay"],
    },
    "orchard": {
        "nouns": ["apple", "ladder", "basket", "branch", "wasp", "picker",
                  "pear", "root", "fence", "barrel"],
        "verbs": ["ripens", "falls", "climbs", "gathers", "prunes", "sorts",
                  "carries", "counts"],
        "adjs": ["ripe", "green", "tall", "wooden", "sweet", "bent"],
        "place": ["row", "grove", "shed", "hill"],
    },
    "foundry": {
        "nouns": ["ingot", "furnace", "mold", "hammer", "spark", "smith",
                  "bellows", "slag", "anvil", "tong"],
        "verbs": ["glows", "cools", "strikes", "pours", "tempers", "casts",
                  "rings", "scales"],
        "adjs": ["molten", "black", "hot", "dull", "hard", "rough"],
        "place": ["forge", "yard", "pit", "hall"],
    },
    "library": {
        "nouns": ["ledger", "scroll", "clerk", "candle", "index", "margin",
                  "volume", "stamp", "shelf", "press"],
        "verbs": ["files", "copies", "binds", "reads", "stacks", "marks",
                  "lends", "seals"],
        "adjs": ["dusty", "thin", "bound", "late", "quiet", "pale"],
        "place": ["aisle", "desk", "archive", "stair"],
    },
}

TEMPLATES = [
    ("the", "ADJ", "NOUN", "VERB", "near", "the", "PLACE"),
    ("a", "NOUN", "VERB", "while", "the", "NOUN", "VERB"),
    ("every", "NOUN", "at", "the", "PLACE", "VERB"),
    ("the", "NOUN", "VERB", "and", "the", "ADJ", "NOUN", "VERB"),
    ("no", "ADJ", "NOUN", "VERB", "at", "the", "PLACE"),
    ("the", "NOUN", "of", "the", "PLACE", "VERB", "again"),
    ("one", "ADJ", "NOUN", "VERB", "then", "VERB"),
]

SLOT_KEYS = {"NOUN": "nouns", "VERB": "verbs", "ADJ": "adjs",
             "PLACE": "place"}


def zipf_weights(n):
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def sentence(rng, topic):
    words = []
    template = TEMPLATES[rng.choice(len(TEMPLATES))]
    for slot in template:
        pool = SLOT_KEYS.get(slot)
        if pool is None:
            words.append(slot)
        else:
            options = topic[pool]
            words.append(options[rng.choice(len(options),
                                            p=zipf_weights(len(options)))])
    return words


def generate(total_tokens, seed):
    rng = np.random.default_rng(seed)
    topic_names = sorted(TOPICS)
    lines = []
    count = 0
    topic = None
    remaining = 0
    while count < total_tokens:
        if remaining <= 0:  # stay on one topic for a stretch of sentences
            topic = TOPICS[topic_names[rng.choice(len(topic_names))]]
            remaining = int(rng.integers(3, 9))
        words = sentence(rng, topic)
        remaining -= 1
        lines.append(" ".join(words))
        count += len(words) + 1  # the loader appends one token per line
    return lines


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--tokens", type=int, default=100000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    lines = generate(args.tokens, args.seed)
    n = len(lines)
    splits = {
        "train.txt": lines[:int(0.8 * n)],
        "valid.txt": lines[int(0.8 * n):int(0.9 * n)],
        "test.txt": lines[int(0.9 * n):],
    }
    os.makedirs(args.out, exist_ok=True)
    vocab = set()
    for name, chunk in splits.items():
        with open(os.path.join(args.out, name), "w", encoding="utf-8") as fh:
            fh.write("\n".join(chunk) + "\n")
        for line in chunk:
            vocab.update(line.split())
    tokens = sum(len(line.split()) + 1 for line in lines)
    print(f"wrote {n} sentences, {tokens} tokens, "
          f"{len(vocab)} word types to {args.out}")


if __name__ == "__main__":
    main()
