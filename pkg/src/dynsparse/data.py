"""Dataset ingestion: IDX image/label files and whitespace-tokenized text.

The IDX reader validates the published magic numbers and payload sizes and
raises a distinct error type per failure mode, so callers can tell a wrong
file apart from a damaged one.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

EOS = "<eos>"
UNK = "<unk>"


class IdxError(ValueError):
    """Base for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class CorpusError(ValueError):
    pass


def read_idx(path, expected_magic):
    """Parse one IDX file with a u8 payload; dimension sizes are big-endian."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: too short for a magic number")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxTruncatedError(f"{path}: header cut off before dimension sizes")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise IdxTruncatedError(
            f"{path}: payload holds {len(buf) - header} bytes, expected {count}")
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=header)
    return data.reshape(dims)


def load_mnist(images_path, labels_path):
    """Images scaled to [0,1] and flattened, labels as ints; counts must match."""
    raw = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if raw.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {raw.shape[0]} images but {labels_path} "
            f"holds {labels.shape[0]} labels")
    images = raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0
    return images, labels.astype(np.int64)


def write_idx_images(path, images):
    """Inverse of the image half of load_mnist; expects u8 (n, rows, cols)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected (n, rows, cols), got shape {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError(f"expected a label vector, got shape {labels.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", LABELS_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# text corpora

@dataclass
class Vocab:
    tokens: list

    def __post_init__(self):
        self.id_of = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def unk_id(self):
        return self.id_of[UNK]

    def lookup(self, token):
        return self.id_of.get(token, self.id_of[UNK])


def _token_lines(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            yield line.split() + [EOS]


def build_vocab(path):
    """Vocabulary over a training file, ordered by descending frequency with
    lexicographic tie-break; <unk> appended if the corpus never used it."""
    counts = Counter()
    for tokens in _token_lines(path):
        counts.update(tokens)
    if not counts:
        raise CorpusError(f"{path}: empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = [t for t, _ in ordered]
    if UNK not in counts:
        tokens.append(UNK)
    return Vocab(tokens)


def load_text_corpus(path, vocab=None):
    """Token id stream for a file, one <eos> per line; builds the vocabulary
    from the file itself unless one is supplied (then unknown tokens map to
    <unk>)."""
    if vocab is None:
        vocab = build_vocab(path)
    ids = []
    for tokens in _token_lines(path):
        ids.extend(vocab.lookup(t) for t in tokens)
    if not ids:
        raise CorpusError(f"{path}: empty corpus")
    return np.array(ids, dtype=np.int64), vocab
