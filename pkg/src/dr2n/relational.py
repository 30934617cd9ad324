"""Relational layers over a fully connected actor graph.

Three variants share the edge/attention machinery:

``dr2n``
    attention over the other valid nodes, node update from ``[h_i; z_i]``.
``rn``
    uniform weights over the other valid nodes, node update from ``[h_i; z_i]``.
``gat``
    attention over all valid nodes including ``i``, node update from ``z_i`` only.

Node sets are ``(N, d)`` or batched ``(B, N, d)`` with a boolean mask of the
leading shape marking real (non-padded) nodes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, ParamStore, Tensor

VARIANTS = ("dr2n", "rn", "gat")

ACTIVATIONS = {
    "identity": dc.identity,
    "relu": dc.relu,
    "tanh": dc.tanh,
}


@dataclass
class NodeSet:
    H: Tensor
    mask: np.ndarray

    def __post_init__(self):
        self.H = dc.as_tensor(self.H)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.H.shape[:-1] != self.mask.shape:
            raise DimensionError(f"node features {self.H.shape} vs mask {self.mask.shape}")

    @property
    def num_nodes(self) -> int:
        return self.H.shape[-2]


@dataclass
class EdgeAttention:
    alpha: Tensor
    logits: Tensor | None
    admissible: np.ndarray


def admissible_mask(mask: np.ndarray, include_self: bool) -> np.ndarray:
    """Pairs (i, j) a node may aggregate from: both valid, and j != i unless ``include_self``."""
    mask = np.asarray(mask, dtype=bool)
    pair = mask[..., :, None] & mask[..., None, :]
    if not include_self:
        n = mask.shape[-1]
        pair = pair & ~np.eye(n, dtype=bool)
    return pair


def edge_features(nodes: NodeSet, w_self: Tensor, w_other: Tensor, bias: Tensor,
                  activation: str = "relu") -> Tensor:
    """``e_ij = act([h_i; h_j] W + b)`` for every ordered pair; shape (..., N, N, d_e).

    The concatenated weight is kept as its two row blocks so the pair tensor
    never has to materialise ``[h_i; h_j]``.
    """
    if not nodes.mask.any():
        raise ValueError("edge_features needs at least one valid node")
    p = dc.matmul(nodes.H, w_self, exact="rows")
    q = dc.matmul(nodes.H, w_other, exact="rows")
    return ACTIVATIONS[activation](dc.add_bias(dc.pairwise_add(p, q), bias))


def attention_weights(edges: Tensor | None, mask: np.ndarray, variant: str,
                      w_attn: Tensor | None = None, b_attn: Tensor | None = None,
                      logits: Tensor | None = None) -> EdgeAttention:
    """Row-normalised weights alpha_ij.

    For ``dr2n``/``gat`` the logits come from ``edges @ w_attn + b_attn``
    unless supplied directly. Rows with no admissible neighbour (a lone node
    under ``dr2n``/``rn``, or a padded node) are all zero.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown relational variant {variant!r}")
    adm = admissible_mask(mask, include_self=(variant == "gat"))
    if variant == "rn":
        counts = adm.sum(axis=-1, keepdims=True)
        alpha = np.where(adm, 1.0 / np.maximum(counts, 1), 0.0)
        return EdgeAttention(Tensor(alpha), None, adm)
    if logits is None:
        scores = dc.matmul(edges, w_attn, exact="rows")
        scores = dc.add_bias(scores, b_attn)
        logits = dc.reshape(scores, scores.shape[:-1])
    alpha = dc.softmax(logits, adm, allow_empty=True)
    return EdgeAttention(alpha, logits, adm)


def virtual_node(nodes: NodeSet, attn: EdgeAttention) -> Tensor:
    """``z_i = sum_j alpha_ij h_j``, accumulated in node order so padding is bit-invisible."""
    return dc.matmul(attn.alpha, nodes.H, exact="terms")


def node_update(nodes: NodeSet, z: Tensor, variant: str, w_node: Tensor, b_node: Tensor,
                activation: str = "tanh") -> Tensor:
    if variant == "gat":
        inp = z
    else:
        inp = dc.concat(nodes.H, z, axis=-1)
    if inp.shape[-1] != w_node.shape[0]:
        raise DimensionError(f"node update input {inp.shape} does not fit weight {w_node.shape}")
    return ACTIVATIONS[activation](dc.add_bias(dc.matmul(inp, w_node, exact="rows"), b_node))


class RelationalLayer:
    """One graph message-passing step ``h -> h~`` for a chosen variant."""

    def __init__(self, params: ParamStore, variant: str, hidden: int, edge_dim: int | None = None,
                 edge_activation: str = "relu", node_activation: str = "tanh",
                 prefix: str = "rel", detach_attention: bool = False):
        if variant not in VARIANTS:
            raise ValueError(f"unknown relational variant {variant!r}")
        self.variant = variant
        self.hidden = hidden
        self.edge_dim = edge_dim or hidden
        self.edge_activation = edge_activation
        self.node_activation = node_activation
        self.detach_attention = detach_attention
        if variant != "rn":
            self.w_edge_self = params.get(f"{prefix}.edge.w_self", (hidden, self.edge_dim))
            self.w_edge_other = params.get(f"{prefix}.edge.w_other", (hidden, self.edge_dim))
            self.b_edge = params.get(f"{prefix}.edge.b", (self.edge_dim,), init="zeros")
            self.w_attn = params.get(f"{prefix}.attn.w", (self.edge_dim, 1))
            self.b_attn = params.get(f"{prefix}.attn.b", (1,), init="zeros")
        node_in = hidden if variant == "gat" else 2 * hidden
        self.w_node = params.get(f"{prefix}.node.w", (node_in, hidden))
        self.b_node = params.get(f"{prefix}.node.b", (hidden,), init="zeros")

    def attention(self, nodes: NodeSet) -> EdgeAttention:
        if self.variant == "rn":
            return attention_weights(None, nodes.mask, "rn")
        e = edge_features(nodes, self.w_edge_self, self.w_edge_other, self.b_edge, self.edge_activation)
        attn = attention_weights(e, nodes.mask, self.variant, self.w_attn, self.b_attn)
        if self.detach_attention:
            attn = EdgeAttention(dc.detach(attn.alpha), attn.logits, attn.admissible)
        return attn

    def __call__(self, nodes: NodeSet) -> tuple[Tensor, EdgeAttention]:
        attn = self.attention(nodes)
        z = virtual_node(nodes, attn)
        out = node_update(nodes, z, self.variant, self.w_node, self.b_node, self.node_activation)
        return out, attn


# ---------------------------------------------------------------- export

def top_k_edges(alpha: np.ndarray, node: int, k: int, step: int = 0) -> list[dict]:
    """The ``k`` strongest incoming relations of ``node`` as JSON-ready records.

    Only positive weights are reported; ties are broken by neighbour index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    row = np.asarray(alpha, dtype=np.float64)[node]
    order = sorted((j for j in range(row.shape[0]) if row[j] > 0), key=lambda j: (-row[j], j))
    return [{"step": int(step), "i": int(node), "j": int(j), "weight": float(row[j])} for j in order[:k]]


def edges_to_dot(records: Sequence[dict], name: str = "attention") -> str:
    """Directed graph ``j -> i`` per record, labelled with the weight."""
    lines = [f"digraph {name} {{"]
    nodes = sorted({r["i"] for r in records} | {r["j"] for r in records})
    for n in nodes:
        lines.append(f'  n{n} [label="{n}"];')
    for r in records:
        w = json.dumps(r["weight"])
        lines.append(f'  n{r["j"]} -> n{r["i"]} [weight="{w}", label="t={r["step"]} {r["weight"]:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
