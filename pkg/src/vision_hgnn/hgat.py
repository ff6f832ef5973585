"""Hypergraph attention layers (node -> hyperedge -> node message passing).

Weights act on row vectors: ``h @ W0`` is the per-row image of ``W0 h``.
Each layer holds Z replicas with their own W0..W3; replicas share the layer
input and their outputs are summed. The attention sums run over neighborhood
lists expressed as masks on the dense incidence matrix, which gives the same
result as looping over members.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Replica = Mapping[str, Tensor]


def _broadcast_rows(v: Tensor, rows: int) -> Tensor:
    """rows x m matrix whose every row is the length-m vector ``v``."""
    ones = Tensor(np.ones((rows, 1), dtype=v.dtype))
    return ad.matmul(ones, ad.reshape(v, (1, v.shape[0])))


def _broadcast_cols(v: Tensor, cols: int) -> Tensor:
    ones = Tensor(np.ones((1, cols), dtype=v.dtype))
    return ad.matmul(ad.reshape(v, (v.shape[0], 1)), ones)


def node_scores(h: Tensor, W0: Tensor) -> tuple[Tensor, Tensor]:
    """Projected nodes ``h W0`` and their scalar scores (component sum of the ReLU)."""
    proj = ad.matmul(h, W0)
    return proj, ad.sum_reduce(ad.relu(proj), axis=1)


def intra_edge_attention(h: Tensor, incidence: np.ndarray, W0: Tensor) -> Tensor:
    """Hyperedges x nodes weights; row p is a softmax over the members of p."""
    _, scores = node_scores(h, W0)
    return _alpha(scores, incidence)


def _alpha(scores: Tensor, incidence: np.ndarray) -> Tensor:
    logits = _broadcast_rows(scores, incidence.shape[1])
    return ad.softmax_over(logits, axis=1, mask=incidence.T)


def hyperedge_embed(h: Tensor, incidence: np.ndarray, replicas: Sequence[Replica]) -> Tensor:
    edges, _ = _hyperedge_embed(h, incidence, replicas)
    return edges


def _hyperedge_embed(h, incidence, replicas):
    total = None
    projections = []
    for rep in replicas:
        proj, scores = node_scores(h, rep["W0"])
        projections.append(proj)
        term = ad.sigmoid(ad.matmul(_alpha(scores, incidence), proj))
        total = term if total is None else ad.add(total, term)
    return total, projections


def inter_edge_attention(
    h: Tensor, h_edges: Tensor, incidence: np.ndarray, W2: Tensor, W3: Tensor
) -> Tensor:
    """Nodes x hyperedges weights; row i is a softmax over the hyperedges holding i.

    The unnormalized score is ``ReLU(W3 . [h_i W2 ; e_p W2])``.
    """
    d = W2.shape[1]
    w3 = ad.reshape(W3, (2 * d, 1))
    w_node = ad.take_rows(w3, np.arange(d))
    w_edge = ad.take_rows(w3, np.arange(d, 2 * d))
    node_part = ad.reshape(ad.matmul(ad.matmul(h, W2), w_node), (h.shape[0],))
    edge_part = ad.reshape(ad.matmul(ad.matmul(h_edges, W2), w_edge), (h_edges.shape[0],))
    n_nodes, n_edges = incidence.shape
    phi = ad.relu(ad.add(_broadcast_cols(node_part, n_edges), _broadcast_rows(edge_part, n_nodes)))
    return ad.softmax_over(phi, axis=1, mask=incidence)


def hypernode_update(
    h: Tensor,
    h_edges: Tensor,
    incidence: np.ndarray,
    replicas: Sequence[Replica],
    projections: Sequence[Tensor] | None = None,
) -> Tensor:
    total = None
    for z, rep in enumerate(replicas):
        proj = projections[z] if projections is not None else ad.matmul(h, rep["W0"])
        beta = inter_edge_attention(h, h_edges, incidence, rep["W2"], rep["W3"])
        message = ad.matmul(beta, ad.matmul(h_edges, rep["W1"]))
        term = ad.relu(ad.add(proj, message))
        total = term if total is None else ad.add(total, term)
    return total


def layer_forward(h: Tensor, incidence: np.ndarray, replicas: Sequence[Replica]) -> Tensor:
    edges, projections = _hyperedge_embed(h, incidence, replicas)
    return hypernode_update(h, edges, incidence, replicas, projections)


def replica_params(params: Mapping[str, Tensor], layer: int, num_replicas: int) -> list[dict[str, Tensor]]:
    return [
        {w: params[f"hgat.{layer}.z{z}.{w}"] for w in ("W0", "W1", "W2", "W3")}
        for z in range(num_replicas)
    ]


def stack_forward(
    X: Tensor,
    incidence: np.ndarray,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    num_layers: int,
    num_replicas: int,
    dropout_rate: float = 0.0,
    training: bool = False,
    key: tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """Run the HgAT layers, then project the concatenated layer outputs.

    Batch norm and dropout sit between consecutive layers only. ``key`` is
    ``(seed, epoch, sample)`` for the dropout masks.
    """
    seed, epoch, sample = key
    outputs = []
    h = X
    for layer in range(num_layers):
        out = layer_forward(h, incidence, replica_params(params, layer, num_replicas))
        outputs.append(out)
        if layer + 1 < num_layers:
            prefix = f"hgat.{layer}.bn"
            h = ad.batch_norm(
                out,
                params[f"{prefix}.gain"],
                params[f"{prefix}.bias"],
                buffers[f"{prefix}.running_mean"],
                buffers[f"{prefix}.running_var"],
                training,
            )
            h = ad.dropout(h, dropout_rate, training, (seed, epoch, layer, sample))
    stacked = outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=1)
    return ad.matmul(stacked, params["hgat.proj"])
