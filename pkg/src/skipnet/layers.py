"""Neural layers: fully-connected, LSTM cell, masked LSTM / BiLSTM runners.

Gate blocks of every LSTM weight matrix are ordered (input, forget,
cell-candidate, output); the forget-gate bias slice is initialized to 1.0.
Variable-length batches are handled by carrying state through masked
steps, so padding never corrupts a row's final state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

GATE_ORDER = ("input", "forget", "cell", "output")

_ACTIVATIONS = {"relu": T.relu, "sigmoid": T.sigmoid, "none": None}


@dataclass
class DenseLayer:
    weight: Tensor  # [fan_in, fan_out]
    bias: Tensor    # [fan_out]
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weight.data.ndim != 2 or self.bias.data.ndim != 1 \
                or self.weight.shape[1] != self.bias.shape[0]:
            raise DimensionError(f"inconsistent dense shapes {tuple(self.weight.shape)} / "
                                 f"{tuple(self.bias.shape)}")


@dataclass
class LstmCell:
    w_input: Tensor   # [fan_in, 4h]
    w_hidden: Tensor  # [h, 4h]
    bias: Tensor      # [4h]
    hidden_size: int

    def __post_init__(self):
        h = self.hidden_size
        if self.w_input.shape[1] != 4 * h or self.w_hidden.shape != (h, 4 * h) \
                or self.bias.shape != (4 * h,):
            raise DimensionError(f"inconsistent LSTM shapes for hidden size {h}")


@dataclass
class BiLstm:
    forward_cell: LstmCell
    backward_cell: LstmCell

    def __post_init__(self):
        f, b = self.forward_cell, self.backward_cell
        if f.hidden_size != b.hidden_size or f.w_input.shape[0] != b.w_input.shape[0]:
            raise DimensionError("forward and backward cells must share input and hidden sizes")


@dataclass
class LstmState:
    h: Tensor  # [batch, h]
    c: Tensor  # [batch, h]

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise DimensionError(f"h/c shape mismatch: {tuple(self.h.shape)} vs {tuple(self.c.shape)}")


def zero_state(batch, hidden_size):
    return LstmState(Tensor(np.zeros((batch, hidden_size))), Tensor(np.zeros((batch, hidden_size))))


def dense_forward(layer, x):
    """activation(x @ W + b) with the bias broadcast to every row."""
    if x.data.ndim != 2 or x.shape[1] != layer.weight.shape[0]:
        raise DimensionError(f"dense input width {tuple(x.shape)} does not match "
                             f"weight {tuple(layer.weight.shape)}")
    out = T.add(T.matmul(x, layer.weight), layer.bias)
    act = _ACTIVATIONS[layer.activation]
    return out if act is None else act(out)


def lstm_step(cell, x_t, state):
    """One LSTM step: c' = s(f).c + s(i).tanh(g); h' = s(o).tanh(c')."""
    if x_t.data.ndim != 2 or x_t.shape[1] != cell.w_input.shape[0]:
        raise DimensionError(f"LSTM input width {tuple(x_t.shape)} does not match "
                             f"weight {tuple(cell.w_input.shape)}")
    if state.h.shape != (x_t.shape[0], cell.hidden_size):
        raise DimensionError(f"LSTM state shape {tuple(state.h.shape)} does not match "
                             f"batch {x_t.shape[0]} x hidden {cell.hidden_size}")
    h = cell.hidden_size
    gates = T.add(T.add(T.matmul(x_t, cell.w_input), T.matmul(state.h, cell.w_hidden)), cell.bias)
    i = T.sigmoid(T.slice_cols(gates, 0, h))
    f = T.sigmoid(T.slice_cols(gates, h, 2 * h))
    g = T.tanh(T.slice_cols(gates, 2 * h, 3 * h))
    o = T.sigmoid(T.slice_cols(gates, 3 * h, 4 * h))
    c_new = T.add(T.mul(f, state.c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return LstmState(h_new, c_new)


def _carry(new, old, mask):
    # masked rows keep the old state exactly: 1*old + 0*new
    return T.add(T.scale_rows(new, mask), T.scale_rows(old, 1.0 - mask))


def lstm_run(cell, xs, init, mask):
    """Run a cell over a time-major sequence with per-step row masks.

    mask[t] is a float 0/1 array of shape [batch]; rows masked at step t
    carry their state through unchanged.  Returns the per-step hidden
    outputs (post-carry) and the final state.
    """
    if len(xs) != len(mask):
        raise ContractError(f"sequence length {len(xs)} != mask length {len(mask)}")
    state = init
    outputs = []
    for x_t, m_t in zip(xs, mask):
        m = np.asarray(m_t, dtype=np.float64)
        new = lstm_step(cell, x_t, state)
        state = LstmState(_carry(new.h, state.h, m), _carry(new.c, state.c, m))
        outputs.append(state.h)
    return outputs, state


def bilstm_run(net, xs, mask):
    """Bidirectional run; output_t = concat(forward_t, backward_t).

    The backward cell consumes the reversed sequence with reversed masks,
    so its final state is the state at the first (unpadded) step.
    """
    batch = xs[0].shape[0] if xs else 0
    h = net.forward_cell.hidden_size
    fwd_out, final_fwd = lstm_run(net.forward_cell, xs, zero_state(batch, h), mask)
    bwd_out_rev, final_bwd = lstm_run(net.backward_cell, list(reversed(xs)),
                                      zero_state(batch, h), list(reversed(mask)))
    bwd_out = list(reversed(bwd_out_rev))
    outputs = [T.concat(f, b, axis=1) for f, b in zip(fwd_out, bwd_out)]
    return outputs, final_fwd, final_bwd


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def glorot_uniform(rng, fan_in, fan_out):
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ContractError(f"fan dimensions must be positive, got ({fan_in}, {fan_out})")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_dense(rng, fan_in, fan_out, activation="none"):
    return DenseLayer(
        weight=Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True),
        bias=Tensor(np.zeros(fan_out), requires_grad=True),
        activation=activation,
    )


def init_lstm_cell(rng, input_size, hidden_size):
    """Glorot weights; zero biases except the forget-gate slice at 1.0."""
    h = hidden_size
    bias = np.zeros(4 * h)
    bias[h:2 * h] = 1.0
    return LstmCell(
        w_input=Tensor(glorot_uniform(rng, input_size, 4 * h), requires_grad=True),
        w_hidden=Tensor(glorot_uniform(rng, h, 4 * h), requires_grad=True),
        bias=Tensor(bias, requires_grad=True),
        hidden_size=h,
    )


def init_bilstm(rng, input_size, hidden_size):
    return BiLstm(
        forward_cell=init_lstm_cell(rng, input_size, hidden_size),
        backward_cell=init_lstm_cell(rng, input_size, hidden_size),
    )


def dense_tensors(prefix, layer):
    return [(f"{prefix}.weight", layer.weight), (f"{prefix}.bias", layer.bias)]


def lstm_tensors(prefix, cell):
    return [(f"{prefix}.w_input", cell.w_input),
            (f"{prefix}.w_hidden", cell.w_hidden),
            (f"{prefix}.bias", cell.bias)]


def bilstm_tensors(prefix, net):
    return lstm_tensors(f"{prefix}.fwd", net.forward_cell) + \
        lstm_tensors(f"{prefix}.bwd", net.backward_cell)
