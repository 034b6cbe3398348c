"""Optimizers, the sparseness ramp, and the train/eval loops.

Every epoch emits one report per split as a JSON line. Reports carry no
wall-clock information, so a fixed seed reproduces the metric stream
byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .models import model_comput_fraction


@dataclass(frozen=True)
class SparsityRamp:
    """Linear increase of the sparseness level over a span of epochs."""

    start_epoch: float
    end_epoch: float
    final_sparseness: float

    def __post_init__(self):
        if self.start_epoch >= self.end_epoch:
            raise ValueError("ramp start must precede end")
        if not 0.0 <= self.final_sparseness < 1.0:
            raise ValueError(
                f"final sparseness must be in [0, 1), got {self.final_sparseness}")


def ramp_value(epoch, ramp):
    """Sparseness at a given epoch: 0 before the ramp, linear within it,
    the final level after. ``ramp=None`` means always 0."""
    if ramp is None:
        return 0.0
    if epoch <= ramp.start_epoch:
        return 0.0
    if epoch >= ramp.end_epoch:
        return ramp.final_sparseness
    frac = (epoch - ramp.start_epoch) / (ramp.end_epoch - ramp.start_epoch)
    return frac * ramp.final_sparseness


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimConfig:
    kind: str = "sgd_momentum"
    lr: float = 5e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _gather_grads(params):
    grads = []
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(
                f"non-finite gradient in parameter {i} (shape {p.data.shape}); "
                "step aborted")
        grads.append(g)
    return grads


def clip_global_norm(grads, max_norm):
    """Scale the whole gradient list so its global L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is not None and total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


class SgdMomentum:
    """Heavy-ball momentum: v = mu*v + g; p -= lr * v."""

    def __init__(self, params, cfg):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = _gather_grads(self.params)
        clip_global_norm(grads, self.cfg.clip_norm)
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.cfg.momentum
            v += g
            p.data -= self.cfg.lr * v
        ad.zero_grads(self.params)


class Adam:
    def __init__(self, params, cfg):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        grads = _gather_grads(self.params)
        clip_global_norm(grads, self.cfg.clip_norm)
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        ad.zero_grads(self.params)


def make_optimizer(params, cfg):
    if cfg.kind == "sgd_momentum":
        return SgdMomentum(params, cfg)
    return Adam(params, cfg)


# ---------------------------------------------------------------------------
# metrics

def perplexity(total_nll, token_count):
    if token_count <= 0:
        raise ValueError("token_count must be positive")
    return float(np.exp(total_nll / token_count))


@dataclass
class EpochReport:
    epoch: int
    split: str
    loss: float
    ppl_or_acc: float
    sparsity: float
    comput_fraction: float
    gating_fallback_count: int

    def to_json(self):
        return json.dumps({
            "epoch": self.epoch,
            "split": self.split,
            "loss": self.loss,
            "ppl_or_acc": self.ppl_or_acc,
            "sparsity": self.sparsity,
            "comput_fraction": self.comput_fraction,
            "gating_fallback_count": self.gating_fallback_count,
        })


def _report(model, epoch, split, loss, metric, sparsity):
    return EpochReport(
        epoch=epoch, split=split, loss=float(loss), ppl_or_acc=float(metric),
        sparsity=float(sparsity),
        comput_fraction=float(model_comput_fraction(model)),
        gating_fallback_count=int(_fallbacks(model)))


def _fallbacks(model):
    fn = getattr(model, "fallback_count", None)
    return fn() if callable(fn) else 0


def _set_sparseness(model, value):
    fn = getattr(model, "set_sparseness", None)
    if callable(fn):
        fn(value)


def _reset_ledgers(model):
    fn = getattr(model, "reset_ledgers", None)
    if callable(fn):
        fn()


# ---------------------------------------------------------------------------
# classifier loops

def train_classifier_epoch(model, images, labels, optim, epoch, sparsity,
                           batch_size, rng):
    """One shuffled pass; returns the train-split report. The sparseness
    level is applied at entry and the ledgers restart from zero."""
    _set_sparseness(model, sparsity)
    _reset_ledgers(model)
    n = len(labels)
    order = rng.permutation(n)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = Tensor(images[idx].T.copy())
        y = labels[idx]
        with Tape() as tape:
            logits = model.forward_batch(x)
            loss = ad.cross_entropy_cols(logits, y)
            tape.backward(loss)
        optim.step()
        total_loss += loss.item() * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=0) == y))
    return _report(model, epoch, "train", total_loss / n, correct / n, sparsity)


def evaluate_classifier(model, images, labels, epoch, sparsity, batch_size=256,
                        split="test"):
    _set_sparseness(model, sparsity)
    _reset_ledgers(model)
    n = len(labels)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        idx = slice(start, min(start + batch_size, n))
        x = Tensor(images[idx].T.copy())
        y = labels[idx]
        logits = model.forward_batch(x)
        loss = ad.cross_entropy_cols(logits, y)
        total_loss += loss.item() * (idx.stop - idx.start)
        correct += int(np.sum(np.argmax(logits.data, axis=0) == y))
    return _report(model, epoch, split, total_loss / n, correct / n, sparsity)


def fit_classifier(model, train_images, train_labels, test_images, test_labels,
                   optim_cfg, epochs, batch_size, ramp, rng, sink=None,
                   eval_batch_size=256):
    """Full training run; returns all reports in emission order."""
    optim = make_optimizer(model.parameters(), optim_cfg)
    reports = []

    def emit(r):
        reports.append(r)
        if sink is not None:
            sink(r)

    for epoch in range(1, epochs + 1):
        sparsity = ramp_value(epoch, ramp)
        emit(train_classifier_epoch(model, train_images, train_labels, optim,
                                    epoch, sparsity, batch_size, rng))
        emit(evaluate_classifier(model, test_images, test_labels, epoch,
                                 sparsity, eval_batch_size))
    return reports


# ---------------------------------------------------------------------------
# language model loops

def batchify(ids, batch_size):
    """Fold a token stream into (steps, batch) columns of contiguous text."""
    ids = np.asarray(ids)
    steps = len(ids) // batch_size
    if steps < 2:
        raise ValueError(
            f"stream of {len(ids)} tokens too short for batch size {batch_size}")
    return ids[:steps * batch_size].reshape(batch_size, steps).T.copy()


def bptt_segments(stream, seg_len):
    """Yield (inputs, targets) pairs covering the stream, each up to seg_len
    steps, targets shifted one step ahead."""
    limit = stream.shape[0] - 1
    for start in range(0, limit, seg_len):
        stop = min(start + seg_len, limit)
        yield stream[start:stop], stream[start + 1:stop + 1]


def train_lm_epoch(model, stream, optim, epoch, sparsity, seg_len, rng,
                   pruner=None):
    """One pass of truncated backprop through time over the batched stream.

    The recurrent state carries across segments but is detached from the
    previous segment's graph, so each backward covers only seg_len steps.
    """
    _set_sparseness(model, sparsity)
    _reset_ledgers(model)
    applied = pruner.on_epoch(epoch) if pruner is not None else None
    state = model.zero_state(stream.shape[1])
    total_nll = 0.0
    total_tokens = 0
    for inputs, targets in bptt_segments(stream, seg_len):
        state = state.detach()
        with Tape() as tape:
            loss, tokens, state = model.segment_loss(
                inputs, targets, state, training=True, rng=rng)
            tape.backward(loss)
        optim.step()
        total_nll += loss.item() * tokens
        total_tokens += tokens
    report_sparsity = applied if applied is not None else sparsity
    if pruner is not None and applied is None:
        report_sparsity = pruner.current_sparsity()
    return _report(model, epoch, "train", total_nll / total_tokens,
                   perplexity(total_nll, total_tokens), report_sparsity)


def evaluate_lm(model, stream, epoch, sparsity, seg_len, split="valid"):
    _set_sparseness(model, sparsity)
    _reset_ledgers(model)
    state = model.zero_state(stream.shape[1])
    total_nll = 0.0
    total_tokens = 0
    for inputs, targets in bptt_segments(stream, seg_len):
        state = state.detach()
        loss, tokens, state = model.segment_loss(inputs, targets, state,
                                                 training=False)
        total_nll += loss.item() * tokens
        total_tokens += tokens
    return _report(model, epoch, split, total_nll / total_tokens,
                   perplexity(total_nll, total_tokens), sparsity)


def fit_lm(model, train_stream, valid_stream, optim_cfg, epochs, seg_len,
           ramp, rng, sink=None, pruner=None):
    optim = make_optimizer(model.parameters(), optim_cfg)
    reports = []

    def emit(r):
        reports.append(r)
        if sink is not None:
            sink(r)

    for epoch in range(1, epochs + 1):
        sparsity = ramp_value(epoch, ramp)
        train_rep = train_lm_epoch(model, train_stream, optim, epoch, sparsity,
                                   seg_len, rng, pruner=pruner)
        emit(train_rep)
        emit(evaluate_lm(model, valid_stream, epoch, train_rep.sparsity,
                         seg_len))
    return reports
