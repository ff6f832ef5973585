"""Hypergraph transformer: unmasked multi-head self-attention over hypernodes.

Each layer re-injects the raw patch embedding (without position terms) ahead
of its first layer norm:

    h' = MSA(LN(h + x_p E)) + h
    z  = MLP(LN(h')) + h'
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


def msa(h: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int, return_attention: bool = False):
    """Multi-head self-attention with per-head query/key/value projections.

    With ``return_attention`` the per-head n x n weight matrices are returned too.
    """
    d = h.shape[1]
    if heads < 1 or d % heads:
        raise ConfigError(f"{heads} heads do not divide model width {d}")
    scale = 1.0 / math.sqrt(d // heads)
    outs, weights = [], []
    for k in range(heads):
        q = ad.matmul(h, params[f"{prefix}.head{k}.Wq"])
        key = ad.matmul(h, params[f"{prefix}.head{k}.Wk"])
        v = ad.matmul(h, params[f"{prefix}.head{k}.Wv"])
        attn = ad.softmax_over(ad.scale(ad.matmul(q, ad.transpose(key)), scale), axis=1)
        weights.append(attn)
        outs.append(ad.matmul(attn, v))
    merged = outs[0] if heads == 1 else ad.concat(outs, axis=1)
    out = ad.matmul(merged, params[f"{prefix}.Wo"])
    return (out, weights) if return_attention else out


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = ad.gelu(ad.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return ad.linear(hidden, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def hgt_layer_forward(
    h: Tensor, patch_embed: Tensor, params: Mapping[str, Tensor], layer: int, heads: int
) -> Tensor:
    if h.shape != patch_embed.shape:
        raise DimensionError(f"hypernode embeddings {h.shape} and patch embeddings {patch_embed.shape} differ")
    p = f"hgt.{layer}"
    normed = ad.layer_norm(ad.add(h, patch_embed), params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
    h_mid = ad.add(msa(normed, params, f"{p}.attn", heads), h)
    normed = ad.layer_norm(h_mid, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
    return ad.add(mlp(normed, params, f"{p}.mlp"), h_mid)


def hgt_stack_forward(
    h: Tensor, patch_embed: Tensor, params: Mapping[str, Tensor], num_layers: int, heads: int
) -> Tensor:
    for layer in range(num_layers):
        h = hgt_layer_forward(h, patch_embed, params, layer, heads)
    return h


def attention_maps(h: Tensor, patch_embed: Tensor, params, num_layers: int, heads: int) -> list[np.ndarray]:
    """Attention matrices of every layer and head, for diagnostics."""
    maps = []
    with ad.no_grad():
        for layer in range(num_layers):
            p = f"hgt.{layer}"
            normed = ad.layer_norm(ad.add(h, patch_embed), params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
            _, weights = msa(normed, params, f"{p}.attn", heads, return_attention=True)
            maps.extend(w.data for w in weights)
            h = hgt_layer_forward(h, patch_embed, params, layer, heads)
    return maps
