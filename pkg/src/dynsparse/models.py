"""Experiment architectures built from the sparse layers.

Two models: a feed-forward image classifier whose hidden layers are
dynamically block-sparse, and a stacked LSTM language model whose
input-to-hidden and hidden-to-hidden matrices can each run dense,
dynamically gated, or statically pruned. Embedding and output projection
always stay dense.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocksparse import ComputeLedger, comput_fraction
from .layers import DenseLinear, DynamicLinear, PrunedLinear

MODES = ("dense", "dynamic", "static")


def _aggregate_ledger(layers):
    total = ComputeLedger()
    for layer in layers:
        total.merge(layer.ledger)
    return total


def model_comput_fraction(model):
    """Compute fraction aggregated over the gated matrices; 1.0 when the
    model has none (dense and statically pruned kernels run every madd)."""
    gated = model.gated_layers()
    if not gated:
        return 1.0
    total = _aggregate_ledger(gated)
    if total.dense_madds == 0:
        return 1.0
    return comput_fraction(total)


def parameter_count(model):
    return sum(p.size for p in model.parameters())


# ---------------------------------------------------------------------------
# feed-forward classifier

@dataclass
class MlpConfig:
    input_dim: int = 784
    num_classes: int = 10
    width: int = 1024
    hidden_layers: int = 5
    block_edge: int = 128
    sparseness: float = 0.9
    key_size: int = None  # None means the full layer input

    def __post_init__(self):
        if self.width % self.block_edge != 0:
            raise ValueError(
                f"width {self.width} not divisible by block edge {self.block_edge}")
        if self.key_size is None:
            self.key_size = self.width

    @property
    def grid_edge(self):
        return self.width // self.block_edge


class SparseMlp:
    """Input projection (dense) -> N dynamically sparse hidden layers with
    ReLU -> dense classifier head. ``mode='dense'`` swaps the hidden layers
    for plain dense ones."""

    def __init__(self, cfg, rng, mode="dynamic"):
        if mode not in ("dense", "dynamic"):
            raise ValueError(f"unsupported MLP mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.input_layer = DenseLinear.create(cfg.width, cfg.input_dim, rng)
        self.hidden = []
        for _ in range(cfg.hidden_layers):
            if mode == "dynamic":
                layer = DynamicLinear.create(
                    cfg.width, cfg.width, cfg.grid_edge, cfg.grid_edge,
                    cfg.sparseness, rng, key_size=cfg.key_size)
            else:
                layer = DenseLinear.create(cfg.width, cfg.width, rng)
            self.hidden.append(layer)
        self.output_layer = DenseLinear.create(cfg.num_classes, cfg.width, rng)

    def forward(self, x):
        h = ad.relu(self.input_layer.forward(x))
        for layer in self.hidden:
            h = ad.relu(layer.forward(h))
        return self.output_layer.forward(h)

    def forward_batch(self, x):
        h = ad.relu(self.input_layer.forward_batch(x))
        for layer in self.hidden:
            h = ad.relu(layer.forward_batch(h))
        return self.output_layer.forward_batch(h)

    def gated_layers(self):
        return [l for l in self.hidden if isinstance(l, DynamicLinear)]

    def last_masks(self):
        return [l.last_mask for l in self.gated_layers()]

    def set_sparseness(self, sparseness):
        for layer in self.gated_layers():
            layer.set_sparseness(sparseness)

    def reset_ledgers(self):
        for layer in self.gated_layers():
            layer.reset_ledger()

    def fallback_count(self):
        return sum(l.fallback_count for l in self.gated_layers())

    def parameters(self):
        out = self.input_layer.parameters()
        for layer in self.hidden:
            out += layer.parameters()
        return out + self.output_layer.parameters()

    def named_parameters(self):
        out = self.input_layer.named_parameters("input.")
        for i, layer in enumerate(self.hidden):
            out += layer.named_parameters(f"hidden{i}.")
        return out + self.output_layer.named_parameters("output.")


# ---------------------------------------------------------------------------
# LSTM language model

@dataclass
class LstmLmConfig:
    vocab_size: int
    embed_dim: int = 1536
    hidden_dim: int = 1536
    num_layers: int = 2
    dropout: float = 0.65
    block_edge: int = 128
    sparseness: float = 0.5
    key_fraction: float = 0.25
    layer_mode: str = "dynamic"  # dense | dynamic | static
    shared_gates: bool = False
    gate_bias: float = 0.1  # raise so more scores start positive on coarse grids

    def __post_init__(self):
        if self.layer_mode not in MODES:
            raise ValueError(f"layer_mode must be one of {MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.layer_mode == "dynamic":
            for dim, name in ((self.hidden_dim, "hidden_dim"),
                              (self.embed_dim, "embed_dim")):
                if dim % self.block_edge != 0:
                    raise ValueError(
                        f"{name} {dim} not divisible by block edge {self.block_edge}")
        if self.shared_gates and self.embed_dim != self.hidden_dim:
            raise ValueError("shared gates need embed_dim == hidden_dim "
                             "so both grids coincide")

    def key_size_for(self, in_dim):
        return max(1, int(in_dim * self.key_fraction))


@dataclass
class LstmState:
    """Per-layer hidden and cell vectors (or column batches)."""

    hidden: list = field(default_factory=list)
    cell: list = field(default_factory=list)

    @classmethod
    def zeros(cls, num_layers, hidden_dim, batch=None):
        shape = (hidden_dim,) if batch is None else (hidden_dim, batch)
        return cls([Tensor(np.zeros(shape)) for _ in range(num_layers)],
                   [Tensor(np.zeros(shape)) for _ in range(num_layers)])

    def detach(self):
        return LstmState([h.detach() for h in self.hidden],
                         [c.detach() for c in self.cell])


class LstmCell:
    """One LSTM layer with fused 4-gate weight matrices.

    The four gate sub-blocks live in single (4H x in) and (4H x H) matrices;
    dynamic gating treats each fused matrix as one block grid.
    """

    def __init__(self, cfg, in_dim, rng, layer_index=0):
        self.in_dim = in_dim
        self.hidden_dim = cfg.hidden_dim
        self.mode = cfg.layer_mode
        self.shared_gates = cfg.shared_gates and self.mode == "dynamic"
        out = 4 * cfg.hidden_dim
        if self.mode == "dynamic":
            blk = cfg.block_edge
            self.wx = DynamicLinear.create(
                out, in_dim, out // blk, in_dim // blk, cfg.sparseness, rng,
                key_size=cfg.key_size_for(in_dim), bias=False, init="lm",
                gate_bias=cfg.gate_bias)
            self.wh = DynamicLinear.create(
                out, cfg.hidden_dim, out // blk, cfg.hidden_dim // blk,
                cfg.sparseness, rng,
                key_size=cfg.key_size_for(cfg.hidden_dim), bias=False,
                init="lm", gate_bias=cfg.gate_bias)
        elif self.mode == "static":
            self.wx = PrunedLinear.create(out, in_dim, rng, bias=False)
            self.wh = PrunedLinear.create(out, cfg.hidden_dim, rng, bias=False)
        else:
            self.wx = DenseLinear.create(out, in_dim, rng, init="lm", bias=False)
            self.wh = DenseLinear.create(out, cfg.hidden_dim, rng, init="lm", bias=False)
        self.bias = Tensor(np.zeros(out), requires_grad=True)
        self.name = f"layer{layer_index}"

    def _preact(self, x, h, x_key, batched):
        if self.mode == "dynamic":
            if batched:
                mask = self.wx.compute_mask_batch(x, x_key)
                zx = self.wx.forward_batch_with_mask(x, mask)
                zh = (self.wh.forward_batch_with_mask(h, mask, count_gating=False)
                      if self.shared_gates else self.wh.forward_batch(h))
            else:
                mask = self.wx.compute_mask(x, x_key)
                zx = self.wx.forward_with_mask(x, mask)
                zh = (self.wh.forward_with_mask(h, mask, count_gating=False)
                      if self.shared_gates else self.wh.forward(h))
        else:
            fwd = "forward_batch" if batched else "forward"
            zx = getattr(self.wx, fwd)(x)
            zh = getattr(self.wh, fwd)(h)
        z = ad.add(zx, zh)
        return ad.add_col(z, self.bias) if batched else ad.add(z, self.bias)

    def step(self, x, h, c, x_key=None):
        """One recurrence step; x_key is the pre-dropout input used for gating."""
        return self._advance(x, h, c, x_key, batched=False)

    def step_batch(self, x, h, c, x_key=None):
        return self._advance(x, h, c, x_key, batched=True)

    def _advance(self, x, h, c, x_key, batched):
        hd = self.hidden_dim
        z = self._preact(x, h, x_key, batched)
        i = ad.sigmoid(ad.narrow(z, 0, hd))
        f = ad.sigmoid(ad.narrow(z, hd, hd))
        g = ad.tanh(ad.narrow(z, 2 * hd, hd))
        o = ad.sigmoid(ad.narrow(z, 3 * hd, hd))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def parameters(self):
        return self.wx.parameters() + self.wh.parameters() + [self.bias]

    def named_parameters(self, prefix=""):
        out = self.wx.named_parameters(prefix + "wx.")
        out += self.wh.named_parameters(prefix + "wh.")
        out.append((prefix + "bias", self.bias))
        return out


class LstmLm:
    """Embedding -> dropout -> LSTM stack -> dropout -> dense softmax layer.

    Dropout touches only the non-recurrent connections; the recurrent state
    is carried untouched. Gate keys are taken pre-dropout.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.embedding = Tensor(
            rng.uniform(-0.05, 0.05, size=(cfg.vocab_size, cfg.embed_dim)),
            requires_grad=True)
        self.cells = []
        for i in range(cfg.num_layers):
            in_dim = cfg.embed_dim if i == 0 else cfg.hidden_dim
            self.cells.append(LstmCell(cfg, in_dim, rng, layer_index=i))
        self.output_layer = DenseLinear.create(
            cfg.vocab_size, cfg.hidden_dim, rng, init="lm")

    def zero_state(self, batch=None):
        return LstmState.zeros(self.cfg.num_layers, self.cfg.hidden_dim, batch)

    def lm_forward(self, token_ids, state=None, training=False, rng=None):
        """Per-step logits for one token sequence, plus the advanced state."""
        if state is None:
            state = self.zero_state()
        rate = self.cfg.dropout
        logits = []
        for tid in token_ids:
            x = _column(ad.embedding(self.embedding, np.array([int(tid)])), 0)
            new_h, new_c = [], []
            for li, cell in enumerate(self.cells):
                x_clean = x
                x_in = ad.dropout(x, rate, training, rng)
                h, c = cell.step(x_in, state.hidden[li], state.cell[li], x_key=x_clean)
                new_h.append(h)
                new_c.append(c)
                x = h
            state = LstmState(new_h, new_c)
            top = ad.dropout(x, rate, training, rng)
            logits.append(self.output_layer.forward(top))
        return logits, state

    def segment_loss(self, inputs, targets, state=None, training=False, rng=None):
        """Mean cross entropy over a (T, B) segment; returns loss, token
        count, and the carried state (detach before the next segment)."""
        inputs = np.asarray(inputs)
        targets = np.asarray(targets)
        if inputs.shape != targets.shape:
            raise ad.ShapeError("segment inputs/targets shape mismatch")
        seq_len, batch = inputs.shape
        if state is None:
            state = self.zero_state(batch)
        rate = self.cfg.dropout
        losses = []
        for t in range(seq_len):
            x = ad.embedding(self.embedding, inputs[t])
            new_h, new_c = [], []
            for li, cell in enumerate(self.cells):
                x_clean = x
                x_in = ad.dropout(x, rate, training, rng)
                h, c = cell.step_batch(x_in, state.hidden[li], state.cell[li],
                                       x_key=x_clean)
                new_h.append(h)
                new_c.append(c)
                x = h
            state = LstmState(new_h, new_c)
            top = ad.dropout(x, rate, training, rng)
            logits = self.output_layer.forward_batch(top)
            losses.append(ad.cross_entropy_cols(logits, targets[t]))
        total = losses[0]
        for piece in losses[1:]:
            total = ad.add(total, piece)
        loss = ad.div_scalar(total, seq_len)
        return loss, seq_len * batch, state

    def gated_layers(self):
        out = []
        for cell in self.cells:
            for layer in (cell.wx, cell.wh):
                if isinstance(layer, DynamicLinear):
                    out.append(layer)
        return out

    def pruned_layers(self):
        out = []
        for cell in self.cells:
            for layer in (cell.wx, cell.wh):
                if isinstance(layer, PrunedLinear):
                    out.append(layer)
        return out

    def set_sparseness(self, sparseness):
        for layer in self.gated_layers():
            layer.set_sparseness(sparseness)

    def reset_ledgers(self):
        for layer in self.gated_layers():
            layer.reset_ledger()

    def fallback_count(self):
        return sum(l.fallback_count for l in self.gated_layers())

    def parameters(self):
        out = [self.embedding]
        for cell in self.cells:
            out += cell.parameters()
        return out + self.output_layer.parameters()

    def named_parameters(self):
        out = [("embedding", self.embedding)]
        for i, cell in enumerate(self.cells):
            out += cell.named_parameters(f"layer{i}.")
        return out + self.output_layer.named_parameters("output.")

    def _pruned_items(self):
        for i, cell in enumerate(self.cells):
            for tag, layer in (("wx", cell.wx), ("wh", cell.wh)):
                if isinstance(layer, PrunedLinear):
                    yield f"layer{i}.{tag}.mask", layer

    def extra_state(self):
        """Non-parameter tensors that must survive a save/load cycle
        (the static keep-masks)."""
        return [(name, layer.mask.astype(np.float64))
                for name, layer in self._pruned_items()]

    def load_extra_state(self, state):
        for name, layer in self._pruned_items():
            if name in state:
                layer.set_mask(state[name] != 0.0)


def _column(x, j):
    # (E, B) -> column j as a vector, keeping the tape connection
    out = x.data[:, j].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, j] = g
        ad._accumulate(x, full)

    return ad._result(out, (x,), backward)


def gating_extra_params(cfg):
    """Closed-form parameter overhead of dynamic gating for an LSTM LM:
    (key_size * r * c + r * c) summed over the gated matrices."""
    blk = cfg.block_edge
    extra = 0
    for i in range(cfg.num_layers):
        in_dim = cfg.embed_dim if i == 0 else cfg.hidden_dim
        for n in (in_dim, cfg.hidden_dim):  # input-to-hidden, hidden-to-hidden
            units = (4 * cfg.hidden_dim // blk) * (n // blk)
            extra += cfg.key_size_for(n) * units + units
    return extra
