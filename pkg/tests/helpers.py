"""Shared numeric utilities for the test suite."""

import numpy as np

from dynsparse import autodiff as ad


def loss_value(build_loss):
    return float(np.asarray(build_loss().data))


def numeric_grad(build_loss, tensor, idx, eps=1e-6):
    """Central-difference derivative of the loss w.r.t. one flat coordinate."""
    flat = tensor.data.reshape(-1)
    old = flat[idx]
    flat[idx] = old + eps
    up = loss_value(build_loss)
    flat[idx] = old - eps
    down = loss_value(build_loss)
    flat[idx] = old
    return (up - down) / (2.0 * eps)


def fd_check(build_loss, tensors, rng, samples=6, eps=1e-6, rel_tol=1e-4):
    """Compare tape gradients of a scalar loss against finite differences.

    ``build_loss`` must be a pure function of the tensors' current data; it is
    re-evaluated many times with single coordinates nudged by ``eps``. A random
    subset of coordinates per tensor is checked. Returns the worst relative
    error seen, and asserts every error is within ``rel_tol``.
    """
    ad.zero_grads(tensors)
    with ad.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        grad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        n = t.data.size
        for idx in rng.choice(n, size=min(samples, n), replace=False):
            fd = numeric_grad(build_loss, t, int(idx), eps=eps)
            an = grad.reshape(-1)[idx]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-2)
            assert err <= rel_tol, (
                f"gradient mismatch at flat index {idx}: "
                f"finite-diff {fd}, tape {an}")
            worst = max(worst, err)
    ad.zero_grads(tensors)
    return worst
