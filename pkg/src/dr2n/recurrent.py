"""GRU cell shared by every actor and every rollout step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, ParamStore, Tensor


@dataclass
class GruState:
    """Hidden vectors, one row per node: shape (..., hidden)."""

    h: Tensor

    def __post_init__(self):
        if not np.all(np.isfinite(self.h.values)):
            raise FloatingPointError("GRU state contains non-finite values")


def init_state(feature, hidden: int | None = None) -> GruState:
    """Initial hidden state is the node feature itself, untransformed."""
    feature = dc.as_tensor(feature)
    if hidden is not None and feature.shape[-1] != hidden:
        raise DimensionError(f"feature dim {feature.shape[-1]} != hidden size {hidden}")
    return GruState(feature)


class GruCell:
    """Gated recurrent unit acting on ``[h; x]`` with one fused weight per gate.

        z  = sigmoid([h, x] W_z + b_z)
        r  = sigmoid([h, x] W_r + b_r)
        hc = tanh([r*h, x] W_h + b_h)
        h' = (1 - z) * h + z * hc

    Parameters live in ``params`` under ``prefix``; building a second cell
    with the same store and prefix yields the same tensors.
    """

    def __init__(self, params: ParamStore, input_dim: int, hidden: int, prefix: str = "gru"):
        self.input_dim = input_dim
        self.hidden = hidden
        self.prefix = prefix
        fan = hidden + input_dim
        self.w_z = params.get(f"{prefix}.w_z", (fan, hidden))
        self.b_z = params.get(f"{prefix}.b_z", (hidden,), init="zeros")
        self.w_r = params.get(f"{prefix}.w_r", (fan, hidden))
        self.b_r = params.get(f"{prefix}.b_r", (hidden,), init="zeros")
        self.w_h = params.get(f"{prefix}.w_h", (fan, hidden))
        self.b_h = params.get(f"{prefix}.b_h", (hidden,), init="zeros")

    @property
    def parameters(self) -> list[Tensor]:
        return [self.w_z, self.b_z, self.w_r, self.b_r, self.w_h, self.b_h]

    def step(self, state: GruState, x) -> GruState:
        h = state.h
        x = dc.as_tensor(x)
        if h.shape[-1] != self.hidden:
            raise DimensionError(f"state dim {h.shape[-1]} != hidden size {self.hidden}")
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"input dim {x.shape[-1]} != {self.input_dim}")
        if h.shape[:-1] != x.shape[:-1]:
            raise DimensionError(f"state {h.shape} and input {x.shape} disagree on leading dims")
        hx = dc.concat(h, x, axis=-1)
        z = dc.sigmoid(dc.add_bias(hx @ self.w_z, self.b_z))
        r = dc.sigmoid(dc.add_bias(hx @ self.w_r, self.b_r))
        rhx = dc.concat(r * h, x, axis=-1)
        cand = dc.tanh(dc.add_bias(rhx @ self.w_h, self.b_h))
        ones = np.ones(z.shape)
        h_new = (ones - z) * h + z * cand
        return GruState(h_new)


def gru_step(cell: GruCell, state: GruState, x) -> GruState:
    return cell.step(state, x)
