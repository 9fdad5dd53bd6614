"""Parameterized layers: affine, encoder/decoder stacks, and the LSTM cell.

Forward passes accept either a single feature vector [in] or a batch
matrix [in, B]; parameters are shared and the vector path is exactly the
B=1 matrix path squeezed back to one dimension.
"""

from __future__ import annotations

from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent deterministic stream for (seed, tags...)."""
    material = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            material.extend(ord(c) for c in t)
        else:
            material.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(material)


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    if out_dim <= 0 or in_dim <= 0:
        raise ShapeError(f"layer dims must be positive, got {out_dim}x{in_dim}")
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def _column_broadcast(vec: Tensor, batch: int) -> Tensor:
    # [d] bias replicated across B columns, differentiable back to the vector
    ones = Tensor(np.ones((1, batch)))
    return T.matmul(T.reshape(vec, (vec.size, 1)), ones)


_ACTIVATIONS = ("tanh", "relu", "sigmoid", "none")


class AffineLayer:
    """activation(W @ x + b) with W [out, in] and b [out]."""

    def __init__(self, weight: Tensor, bias: Tensor, activation: str = "none"):
        if activation not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation '{activation}'")
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"inconsistent affine shapes W{weight.shape} b{bias.shape}")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        single = x.ndim == 1
        if single:
            if x.shape[0] != self.in_dim:
                raise ShapeError(f"affine expects input [{self.in_dim}], got {x.shape}")
            x = T.reshape(x, (x.shape[0], 1))
        elif x.shape[0] != self.in_dim:
            raise ShapeError(f"affine expects input [{self.in_dim}, B], got {x.shape}")
        z = T.add(T.matmul(self.weight, x), _column_broadcast(self.bias, x.shape[1]))
        if self.activation == "tanh":
            z = T.tanh(z)
        elif self.activation == "relu":
            z = T.relu(z)
        elif self.activation == "sigmoid":
            z = T.sigmoid(z)
        if single:
            z = T.reshape(z, (self.out_dim,))
        return z

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def make_affine(rng, in_dim: int, out_dim: int, activation: str = "none") -> AffineLayer:
    w = Tensor(glorot_uniform(rng, out_dim, in_dim), requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True)
    return AffineLayer(w, b, activation)


class Stack:
    """Ordered affine layers applied in sequence."""

    def __init__(self, layers: Sequence[AffineLayer]):
        if not layers:
            raise ShapeError("stack needs at least one layer")
        self.layers = list(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def parameters(self):
        named = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters():
                named.append((f"{i}.{name}", p))
        return named


class EncoderStack(Stack):
    """Feature compressor; the final layer's width is the latent size."""

    @property
    def latent_dim(self) -> int:
        return self.out_dim


class DecoderStack(Stack):
    """Mirror of an encoder; final activation sigmoid for pixel range [0, 1]."""


def make_encoder(rng, dims: Sequence[int], activation: str = "tanh") -> EncoderStack:
    layers = [make_affine(rng, dims[i], dims[i + 1], activation)
              for i in range(len(dims) - 1)]
    return EncoderStack(layers)


def make_decoder(rng, dims: Sequence[int], activation: str = "tanh") -> DecoderStack:
    layers = []
    for i in range(len(dims) - 1):
        act = "sigmoid" if i == len(dims) - 2 else activation
        layers.append(make_affine(rng, dims[i], dims[i + 1], act))
    return DecoderStack(layers)


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor

    @staticmethod
    def zeros(hidden_size: int, batch: Optional[int] = None) -> "LstmState":
        shape = (hidden_size,) if batch is None else (hidden_size, batch)
        return LstmState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


class LstmCell:
    """Single LSTM cell; gate block order is fixed as (input, forget, cell, output).

    W is [4h, in + h] over the concatenated [x ; h] vector, b is [4h].
    """

    def __init__(self, W: Tensor, b: Tensor, input_size: int, hidden_size: int):
        if W.shape != (4 * hidden_size, input_size + hidden_size):
            raise ShapeError(f"LSTM W shape {W.shape} does not match "
                             f"4*{hidden_size} x ({input_size}+{hidden_size})")
        if b.shape != (4 * hidden_size,):
            raise ShapeError(f"LSTM b shape {b.shape} does not match 4*{hidden_size}")
        self.W = W
        self.b = b
        self.input_size = input_size
        self.hidden_size = hidden_size

    def step(self, x: Tensor, state: LstmState):
        """One recurrence step; returns (y, new_state) with y == new h."""
        h = self.hidden_size
        single = x.ndim == 1
        if single:
            x = T.reshape(x, (x.shape[0], 1))
        hs = state.h if state.h.ndim == 2 else T.reshape(state.h, (h, 1))
        cs = state.c if state.c.ndim == 2 else T.reshape(state.c, (h, 1))
        if x.shape[0] != self.input_size:
            raise ShapeError(f"LSTM expects input [{self.input_size}], got {x.shape}")
        joint = T.concat([x, hs], axis=0)
        z = T.add(T.matmul(self.W, joint), _column_broadcast(self.b, x.shape[1]))
        i = T.sigmoid(T.narrow(z, 0, 0, h))
        f = T.sigmoid(T.narrow(z, 0, h, h))
        g = T.tanh(T.narrow(z, 0, 2 * h, h))
        o = T.sigmoid(T.narrow(z, 0, 3 * h, h))
        c_new = T.add(T.mul(f, cs), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        if single:
            h_new = T.reshape(h_new, (h,))
            c_new = T.reshape(c_new, (h,))
        return h_new, LstmState(h_new, c_new)

    def parameters(self):
        return [("W", self.W), ("b", self.b)]


def make_lstm(rng, input_size: int, hidden_size: int) -> LstmCell:
    W = Tensor(glorot_uniform(rng, 4 * hidden_size, input_size + hidden_size),
               requires_grad=True)
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = 1.0  # forget-gate bias; fights early vanishing
    return LstmCell(W, Tensor(b, requires_grad=True), input_size, hidden_size)


def lstm_unroll(cell: LstmCell, xs: Sequence[Tensor], state0: LstmState):
    """Repeated ``step`` over a sequence; returns every intermediate state."""
    xs = list(xs)
    if not xs:
        raise ShapeError("lstm_unroll requires a nonempty sequence")
    ys: List[Tensor] = []
    states: List[LstmState] = []
    state = state0
    for x in xs:
        y, state = cell.step(x, state)
        ys.append(y)
        states.append(state)
    return ys, states
