"""Block-partitioned weight matrices and the gated matrix-vector product.

A BlockMatrix stores an (m, n) weight matrix as an r x c grid of dense
blocks. The gated product applies one gate coefficient per block and never
reads a closed block, in forward or backward; per-block access counters make
that property testable. A ComputeLedger tracks the multiply-add counts that
back the reported compute fractions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gating import GateMask, GateMaskBatch


class BlockMatrix:
    """An (m, n) matrix as an (r, c) grid of dense (m/r, n/c) blocks.

    The parameter tensor has shape (r, c, bh, bw): each block contiguous,
    blocks laid out row-major over the grid. Reassembly is a pure reordering,
    so it reproduces the logical matrix bit-exactly.
    """

    def __init__(self, param, rows, cols):
        if param.ndim != 4 or param.shape[:2] != (rows, cols):
            raise ad.ShapeError(f"block parameter shape {param.shape} does not "
                                f"match a {rows}x{cols} grid")
        self.param = param
        self.grid_rows = rows
        self.grid_cols = cols
        self.block_height = param.shape[2]
        self.block_width = param.shape[3]
        self.m = rows * self.block_height
        self.n = cols * self.block_width
        self.reset_access_counts()

    @classmethod
    def from_dense(cls, matrix, rows, cols, requires_grad=True):
        matrix = np.asarray(matrix, dtype=np.float64)
        m, n = matrix.shape
        if m % rows != 0 or n % cols != 0:
            raise ValueError(
                f"grid {rows}x{cols} does not divide matrix {m}x{n} exactly")
        bh, bw = m // rows, n // cols
        blocks = matrix.reshape(rows, bh, cols, bw).transpose(0, 2, 1, 3).copy()
        return cls(Tensor(blocks, requires_grad=requires_grad), rows, cols)

    @classmethod
    def random(cls, m, n, rows, cols, scale, rng, requires_grad=True):
        if m % rows != 0 or n % cols != 0:
            raise ValueError(f"grid {rows}x{cols} does not divide {m}x{n} exactly")
        return cls.from_dense(rng.uniform(-scale, scale, size=(m, n)),
                              rows, cols, requires_grad=requires_grad)

    @property
    def units(self):
        return self.grid_rows * self.grid_cols

    def assemble(self):
        """The logical (m, n) matrix, reconstructed from the block storage."""
        return (self.param.data
                .transpose(0, 2, 1, 3)
                .reshape(self.m, self.n))

    def reset_access_counts(self):
        self.forward_reads = np.zeros((self.grid_rows, self.grid_cols), dtype=np.int64)
        self.backward_reads = np.zeros((self.grid_rows, self.grid_cols), dtype=np.int64)


@dataclass
class ComputeLedger:
    """Multiply-add accounting for gated layers.

    ``actual_madds`` always decomposes as computed-blocks * block area plus
    the gating overhead; selection comparisons and normalization divisions
    are tallied separately in ``aux_ops`` and excluded from the fraction.
    """

    dense_madds: int = 0
    actual_madds: int = 0
    gating_madds: int = 0
    aux_ops: int = 0
    blocks_computed: int = 0
    calls: int = 0

    def add_gated_call(self, open_blocks, block_height, block_width, m, n):
        self.dense_madds += m * n
        self.actual_madds += open_blocks * block_height * block_width
        self.blocks_computed += open_blocks
        self.calls += 1

    def add_gating_overhead(self, madds, aux_ops=0):
        self.gating_madds += madds
        self.actual_madds += madds
        self.aux_ops += aux_ops

    def merge(self, other):
        self.dense_madds += other.dense_madds
        self.actual_madds += other.actual_madds
        self.gating_madds += other.gating_madds
        self.aux_ops += other.aux_ops
        self.blocks_computed += other.blocks_computed
        self.calls += other.calls

    def reset(self):
        self.dense_madds = 0
        self.actual_madds = 0
        self.gating_madds = 0
        self.aux_ops = 0
        self.blocks_computed = 0
        self.calls = 0


def comput_fraction(ledger):
    """actual / dense multiply-adds, the reported compute fraction."""
    if ledger.dense_madds <= 0:
        raise ValueError("compute fraction undefined without dense madds")
    return ledger.actual_madds / ledger.dense_madds


def _mask_values(mask):
    if isinstance(mask, (GateMask, GateMaskBatch)):
        return mask.values
    return mask


def gated_matvec(w, h, mask):
    """(mask expanded over blocks) ⊙ W applied to h, skipping closed blocks.

    Returns the (m,) product and a ledger for this call. Closed blocks are
    never read; gradients flow to the open blocks, to the mask coefficients,
    and to h.
    """
    values = _mask_values(mask)
    if h.ndim != 1 or h.shape[0] != w.n:
        raise ad.ShapeError(f"gated_matvec: input shape {h.shape} for matrix n={w.n}")
    if values.size != w.units:
        raise ad.ShapeError(
            f"gated_matvec: mask size {values.size} for {w.units} blocks")
    r, c = w.grid_rows, w.grid_cols
    bh, bw = w.block_height, w.block_width
    mvals = values.data.reshape(r, c)
    open_ij = np.argwhere(mvals != 0.0)

    out = np.zeros(w.m)
    products = {}
    for i, j in open_ij:
        block = w.param.data[i, j]
        w.forward_reads[i, j] += 1
        prod = block @ h.data[j * bw:(j + 1) * bw]
        products[(i, j)] = prod
        out[i * bh:(i + 1) * bh] += mvals[i, j] * prod

    ledger = ComputeLedger()
    ledger.add_gated_call(len(open_ij), bh, bw, w.m, w.n)

    def backward(g):
        w_grad = None
        if w.param.requires_grad:
            if w.param.grad is None:
                w.param.grad = np.zeros_like(w.param.data)
            w_grad = w.param.grad
        v_grad = np.zeros(values.size) if values.requires_grad else None
        h_grad = np.zeros_like(h.data) if h.requires_grad else None
        for i, j in open_ij:
            gi = g[i * bh:(i + 1) * bh]
            hj = h.data[j * bw:(j + 1) * bw]
            if w_grad is not None:
                w_grad[i, j] += mvals[i, j] * np.outer(gi, hj)
            if v_grad is not None:
                v_grad[i * c + j] = gi @ products[(i, j)]
            if h_grad is not None:
                w.backward_reads[i, j] += 1
                h_grad[j * bw:(j + 1) * bw] += mvals[i, j] * (w.param.data[i, j].T @ gi)
        if v_grad is not None:
            ad._accumulate(values, v_grad.reshape(values.shape))
        if h_grad is not None:
            ad._accumulate(h, h_grad)

    return ad._result(out, (w.param, h, values), backward), ledger


def gated_matmul(w, x, masks):
    """Column-batched gated product: column j of x is gated by mask column j.

    Blocks closed in every column of the batch are never read.
    """
    values = _mask_values(masks)
    if x.ndim != 2 or x.shape[0] != w.n:
        raise ad.ShapeError(f"gated_matmul: input shape {x.shape} for matrix n={w.n}")
    if values.ndim != 2 or values.shape != (w.units, x.shape[1]):
        raise ad.ShapeError(
            f"gated_matmul: mask shape {values.shape} for {w.units} blocks "
            f"and batch {x.shape[1]}")
    r, c = w.grid_rows, w.grid_cols
    bh, bw = w.block_height, w.block_width
    batch = x.shape[1]

    out = np.zeros((w.m, batch))
    saved = {}
    open_blocks = 0
    for flat in np.flatnonzero(values.data.any(axis=1)):
        i, j = divmod(int(flat), c)
        cols = np.flatnonzero(values.data[flat] != 0.0)
        vals = values.data[flat, cols]
        w.forward_reads[i, j] += 1
        prod = w.param.data[i, j] @ x.data[j * bw:(j + 1) * bw, cols]
        saved[flat] = (cols, vals, prod)
        out[i * bh:(i + 1) * bh, cols] += vals[None, :] * prod
        open_blocks += len(cols)

    # dense reference is m*n per batch column
    ledger = ComputeLedger(dense_madds=w.m * w.n * batch,
                           actual_madds=open_blocks * bh * bw,
                           blocks_computed=open_blocks, calls=batch)

    def backward(g):
        w_grad = None
        if w.param.requires_grad:
            if w.param.grad is None:
                w.param.grad = np.zeros_like(w.param.data)
            w_grad = w.param.grad
        v_grad = np.zeros_like(values.data) if values.requires_grad else None
        x_grad = np.zeros_like(x.data) if x.requires_grad else None
        for flat, (cols, vals, prod) in saved.items():
            i, j = divmod(int(flat), c)
            gi = g[i * bh:(i + 1) * bh, cols]
            if w_grad is not None:
                w_grad[i, j] += (gi * vals[None, :]) @ x.data[j * bw:(j + 1) * bw, cols].T
            if v_grad is not None:
                v_grad[flat, cols] = (gi * prod).sum(axis=0)
            if x_grad is not None:
                w.backward_reads[i, j] += 1
                x_grad[j * bw:(j + 1) * bw, cols] += w.param.data[i, j].T @ (gi * vals[None, :])
        if v_grad is not None:
            ad._accumulate(values, v_grad)
        if x_grad is not None:
            ad._accumulate(x, x_grad)

    return ad._result(out, (w.param, x, values), backward), ledger
