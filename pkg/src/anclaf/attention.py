"""Attention over a sliding window of previous combined LSTM states.

A combined state is [h ; c] (length 2h).  Scores come either from the
concatenation form (weight row over [current ; candidate], width 4h) or
the location form (weight row over the candidate alone, width 2h); the
weight count is independent of the window length, which is what makes
curriculum weight transfer possible.  The context vector is the
softmax-weighted sum of window states divided by the window size; the
extra division is deliberate and can be disabled for ablation.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import LstmState
from .tensor import Tensor

MODES = ("concat", "location")


class AttentionParams:
    """Scoring weights; ``w`` is [1, 4h] for concat mode, [1, 2h] for location."""

    def __init__(self, w: Tensor, mode: str, hidden_size: int):
        if mode not in MODES:
            raise ShapeError(f"unknown attention mode '{mode}'")
        expected = 4 * hidden_size if mode == "concat" else 2 * hidden_size
        if w.shape != (1, expected):
            raise ShapeError(f"attention weights shape {w.shape}, expected (1, {expected})")
        self.w = w
        self.mode = mode
        self.hidden_size = hidden_size

    def parameters(self):
        return [("w", self.w)]


def make_attention(rng, hidden_size: int, mode: str = "concat") -> AttentionParams:
    from .layers import glorot_uniform

    width = 4 * hidden_size if mode == "concat" else 2 * hidden_size
    w = Tensor(glorot_uniform(rng, 1, width), requires_grad=True)
    return AttentionParams(w, mode, hidden_size)


def combined_state(state: LstmState) -> Tensor:
    """[h ; c] concatenation, batched or single."""
    return T.concat([state.h, state.c], axis=0)


class StateWindow:
    """Ring buffer of up to ``max_size`` combined states, oldest first."""

    def __init__(self, max_size: int):
        if max_size < 1:
            raise ShapeError("window size must be at least 1")
        self.max_size = max_size
        self._states: List[Tensor] = []

    def push(self, state: Tensor) -> None:
        if self._states and state.shape != self._states[0].shape:
            raise ShapeError(f"window state shape {state.shape} does not match "
                             f"stored {self._states[0].shape}")
        self._states.append(state)
        if len(self._states) > self.max_size:
            self._states.pop(0)

    def clear(self) -> None:
        self._states.clear()

    @property
    def states(self) -> List[Tensor]:
        return list(self._states)

    def __len__(self) -> int:
        return len(self._states)


def _lift(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 1:
        return T.reshape(x, (x.shape[0], 1)), True
    return x, False


def alignment(params: AttentionParams, current: Tensor, window: StateWindow) -> Tensor:
    """Softmax-normalized scores over the window; [k] single or [B, k] batched."""
    if len(window) == 0:
        raise ShapeError("alignment requires a nonempty window")
    cur, single = _lift(current)
    cols = []
    for s in window.states:
        s2, _ = _lift(s)
        if params.mode == "concat":
            score = T.matmul(params.w, T.concat([cur, s2], axis=0))
        else:
            score = T.matmul(params.w, s2)
        cols.append(T.reshape(score, (score.shape[1], 1)))
    scores = T.concat(cols, axis=1) if len(cols) > 1 else cols[0]
    weights = T.softmax(scores)  # softmax over the window axis (last)
    if single:
        weights = T.reshape(weights, (len(window),))
    return weights


def context_vector(weights: Tensor, window: StateWindow,
                   divide_by_count: bool = True) -> Tensor:
    """Weighted average of window states, divided by the window size k."""
    k = len(window)
    if k == 0:
        raise ShapeError("context_vector requires a nonempty window")
    single = weights.ndim == 1
    if single:
        if weights.shape != (k,):
            raise ShapeError(f"got {weights.shape} weights for window of {k}")
        wmat = T.reshape(weights, (1, k))
    else:
        if weights.shape[1] != k:
            raise ShapeError(f"got {weights.shape} weights for window of {k}")
        wmat = weights
    ctx: Optional[Tensor] = None
    dim = window.states[0].shape[0]
    ones = Tensor(np.ones((dim, 1)))
    for j, s in enumerate(window.states):
        s2, _ = _lift(s)
        w_col = T.reshape(T.narrow(wmat, 1, j, 1), (1, wmat.shape[0]))
        term = T.mul(T.matmul(ones, w_col), s2)
        ctx = term if ctx is None else T.add(ctx, term)
    if divide_by_count:
        ctx = T.scale(ctx, 1.0 / k)
    if single:
        ctx = T.reshape(ctx, (dim,))
    return ctx


def attend_and_augment(params: AttentionParams, zq: Tensor, state: LstmState,
                       window: StateWindow, divide_by_count: bool = True
                       ) -> Tuple[Tensor, Optional[Tensor]]:
    """Build the LSTM input [context ; zq]; empty window gives a zero context.

    Returns the augmented input and the attention weights (None when the
    window is empty).  The caller pushes the post-step combined state.
    """
    h2 = 2 * params.hidden_size
    if len(window) == 0:
        shape = (h2,) if zq.ndim == 1 else (h2, zq.shape[1])
        return T.concat([Tensor(np.zeros(shape)), zq], axis=0), None
    weights = alignment(params, combined_state(state), window)
    ctx = context_vector(weights, window, divide_by_count=divide_by_count)
    return T.concat([ctx, zq], axis=0), weights
