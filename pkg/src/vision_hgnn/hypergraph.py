"""Top-K visual hypergraph construction over patch embeddings.

Hyperedge ``p`` is centred on hypernode ``p`` and holds ``p`` plus its K
nearest hypernodes, so the incidence matrix is square and every column has
K+1 true entries. Selection is discrete; gradients flow only through the
features.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

METRICS = ("euclidean", "cosine")


@dataclass
class VisualHypergraph:
    incidence: np.ndarray  # nodes x hyperedges, bool; entry (i, p) is node i in edge p
    features: Tensor
    k: int
    virtual: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.incidence.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.incidence.shape[0]

    @cached_property
    def members(self) -> list[np.ndarray]:
        """Hypernode indices of each hyperedge."""
        return [np.flatnonzero(col) for col in self.incidence.T]

    @cached_property
    def memberships(self) -> list[np.ndarray]:
        """Hyperedge indices containing each hypernode."""
        return [np.flatnonzero(row) for row in self.incidence]

    def edge_list(self) -> str:
        return "\n".join(f"{p}: " + ",".join(str(i) for i in m) for p, m in enumerate(self.members))


def embed_patches(features, E: Tensor) -> Tensor:
    """Linear patch embedding ``X' E``."""
    xp = features if isinstance(features, Tensor) else Tensor(features, dtype=E.dtype)
    if xp.ndim != 2 or xp.shape[1] != E.shape[0]:
        raise DimensionError(f"patch features {xp.shape} do not match embedding {E.shape}")
    return ad.matmul(xp, E)


def add_position(X: Tensor, E_pos: Tensor) -> Tensor:
    if X.shape != E_pos.shape:
        raise DimensionError(f"position embedding {E_pos.shape} does not match features {X.shape}")
    return ad.add(X, E_pos)


def pairwise_distances(X, metric: str = "euclidean") -> np.ndarray:
    """n x n distances between feature rows; symmetric with a zero diagonal."""
    x = X.data if isinstance(X, Tensor) else np.asarray(X)
    x = x.astype(np.float64)
    if metric == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = x / safe[:, None]
        sim = np.clip(unit @ unit.T, -1.0, 1.0)
        sim = np.where(np.outer(norms > 0, norms > 0), sim, 0.0)
        dist = 1.0 - sim
        dist = 0.5 * (dist + dist.T)
        np.fill_diagonal(dist, 0.0)
        return dist
    raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")


def build_incidence(dist: np.ndarray, k: int, clamp: bool = False) -> np.ndarray:
    """Incidence whose column p marks p and its k nearest hypernodes.

    Ties go to the smaller index. With ``clamp`` an oversized k is reduced to
    n - 1 with a warning instead of raising.
    """
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise DimensionError(f"distance matrix must be square, got {dist.shape}")
    if k >= n:
        if not clamp:
            raise ConfigError(f"K={k} must be smaller than the number of hypernodes n={n}")
        warnings.warn(f"K={k} clamped to {n - 1} for n={n}", stacklevel=2)
        k = n - 1
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    ranked = np.array(dist, dtype=np.float64, copy=True)
    np.fill_diagonal(ranked, -np.inf)
    order = np.argsort(ranked, axis=1, kind="stable")[:, : k + 1]
    incidence = np.zeros((n, n), dtype=bool)
    incidence[order, np.arange(n)[:, None]] = True
    return incidence


def build_hypergraph(X: Tensor, k: int, metric: str = "euclidean", clamp: bool = False) -> VisualHypergraph:
    if X.shape[0] < 2:
        raise ConfigError("a hypergraph needs at least two hypernodes")
    incidence = build_incidence(pairwise_distances(X, metric), k, clamp)
    return VisualHypergraph(incidence, X, min(k, X.shape[0] - 1))


def intra_neighborhood(incidence: np.ndarray, p: int) -> list[int]:
    """Hypernodes belonging to hyperedge ``p``."""
    if not 0 <= p < incidence.shape[1]:
        raise IndexError(f"hyperedge {p} out of range for {incidence.shape[1]} hyperedges")
    return np.flatnonzero(incidence[:, p]).tolist()


def inter_neighborhood(incidence: np.ndarray, i: int) -> list[int]:
    """Hyperedges containing hypernode ``i``."""
    if not 0 <= i < incidence.shape[0]:
        raise IndexError(f"hypernode {i} out of range for {incidence.shape[0]} hypernodes")
    return np.flatnonzero(incidence[i]).tolist()


def add_virtual_hypernode(G: VisualHypergraph) -> VisualHypergraph:
    """Append a master hypernode that belongs to every hyperedge, with zero features."""
    incidence = np.vstack([G.incidence, np.ones((1, G.n), dtype=bool)])
    zero_row = Tensor(np.zeros((1, G.features.shape[1]), dtype=G.features.dtype))
    features = ad.concat([G.features, zero_row], axis=0)
    return VisualHypergraph(incidence, features, G.k, virtual=True)
