"""LSTM cell, bidirectional encoder, embeddings and linear heads.

All layers run on batched inputs: vectors are (batch, width) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import ContractError, ParameterStore, Tensor, concat, linear, lstm_cell, lstm_sequence, take_rows, tanh

INIT_SCALE = 0.08
GATES = ("i", "f", "g", "o")


def uniform_init(rng: RngStream, shape, scale: float = INIT_SCALE) -> np.ndarray:
    n = int(np.prod(shape))
    return rng.uniform_array(n, -scale, scale).reshape(shape)


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


class LstmCell:
    """Standard LSTM: sigmoid input/forget/output gates, tanh candidate.

    The four (H, D+H) gate matrices are stored stacked in one (4H, D+H)
    parameter ``W`` in input, forget, cell, output order (likewise the bias
    ``b``); :meth:`gate_weight` returns one block.  The forget bias starts at 1.
    """

    def __init__(self, store: ParameterStore, name: str, input_size: int, hidden_size: int, rng: RngStream):
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        self.w = store.add(f"{name}.W", uniform_init(rng, (4 * H, input_size + H)))
        bias = uniform_init(rng, (4 * H,))
        bias[H:2 * H] = 1.0
        self.b = store.add(f"{name}.b", bias)

    def gate_weight(self, gate: str) -> np.ndarray:
        k = GATES.index(gate)
        return self.w.data[k * self.hidden_size:(k + 1) * self.hidden_size]

    def gate_bias(self, gate: str) -> np.ndarray:
        k = GATES.index(gate)
        return self.b.data[k * self.hidden_size:(k + 1) * self.hidden_size]

    def zero_state(self, batch: int) -> LstmState:
        z = np.zeros((batch, self.hidden_size))
        return LstmState(Tensor(z), Tensor(z.copy()))

    def step(self, x: Tensor, state: LstmState) -> LstmState:
        if x.shape[-1] != self.input_size:
            raise ContractError(f"lstm_step: input width {x.shape[-1]} != cell input size {self.input_size}")
        if state.h.shape[-1] != self.hidden_size:
            raise ContractError(f"lstm_step: state width {state.h.shape[-1]} != hidden size {self.hidden_size}")
        h, c = lstm_cell(x, state.h, state.c, self.w, self.b)
        return LstmState(h, c)

    def run(self, xs, reverse: bool = False) -> tuple[Tensor, Tensor]:
        """Whole sequence from a zero state: (all hidden states (batch, n, H), last state)."""
        return lstm_sequence(xs, self.w, self.b, reverse)


def lstm_step(cell: LstmCell, x: Tensor, state: LstmState) -> LstmState:
    return cell.step(x, state)


class Linear:
    def __init__(self, store: ParameterStore, name: str, in_size: int, out_size: int, rng: RngStream,
                 bias: bool = True):
        self.w = store.add(f"{name}.W", uniform_init(rng, (out_size, in_size)))
        self.b = store.add(f"{name}.b", uniform_init(rng, (out_size,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class EmbeddingTable:
    def __init__(self, store: ParameterStore, name: str, vocab_size: int, emb_size: int, rng: RngStream):
        self.vocab_size = vocab_size
        self.emb_size = emb_size
        self.table = store.add(f"{name}.E", uniform_init(rng, (vocab_size, emb_size)))

    def __call__(self, ids) -> Tensor:
        """Rows for ``ids`` (an int gives a 1-D vector, an int array a (n, E) matrix)."""
        return take_rows(self.table, ids)


def embed(table: EmbeddingTable, token_id) -> Tensor:
    return table(token_id)


@dataclass
class BiEncoderOutput:
    keys: Tensor              # (batch, n, 2H): forward || backward state per step
    final: Tensor             # concat(forward_n, backward_1), (batch, 2H)
    init_state: LstmState     # decoder-sized start state

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    @property
    def states(self) -> list[np.ndarray]:
        """Per-step encoder states h_i^e as arrays of shape (batch, 2H)."""
        return [self.keys.data[:, i] for i in range(self.length)]


class BiEncoder:
    """Bidirectional LSTM with a tanh bridge into the decoder's (h, c)."""

    def __init__(self, store: ParameterStore, name: str, input_size: int, hidden_size: int,
                 decoder_size: int, rng: RngStream):
        self.hidden_size = hidden_size
        self.fwd = LstmCell(store, f"{name}.fwd", input_size, hidden_size, rng)
        self.bwd = LstmCell(store, f"{name}.bwd", input_size, hidden_size, rng)
        self.bridge_h = Linear(store, f"{name}.bridge_h", 2 * hidden_size, decoder_size, rng)
        self.bridge_c = Linear(store, f"{name}.bridge_c", 2 * hidden_size, decoder_size, rng)

    def __call__(self, inputs) -> BiEncoderOutput:
        """``inputs`` is a (batch, n, features) array or tensor."""
        x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=np.float64))
        if x.data.ndim != 3 or x.shape[1] == 0:
            raise ContractError(f"encode_bidirectional needs a nonempty (batch, n, features) input, got {x.shape}")
        fwd, fwd_last = self.fwd.run(x)
        bwd, bwd_first = self.bwd.run(x, reverse=True)
        final = concat([fwd_last, bwd_first])
        init = LstmState(tanh(self.bridge_h(final)), tanh(self.bridge_c(final)))
        return BiEncoderOutput(concat([fwd, bwd]), final, init)


def encode_bidirectional(encoder: BiEncoder, inputs: np.ndarray) -> BiEncoderOutput:
    return encoder(inputs)


class VocabHead(Linear):
    """Projection of a decoder hidden state to vocabulary logits."""


def project_vocab(head: Linear, h: Tensor) -> Tensor:
    return head(h)
