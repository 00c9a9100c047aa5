"""Graph projection head: flatten the adaptive graph, one linear map.

v = flatten(g) @ W_G with W_G of shape (K_S * N^2, C_g). No bias, no
activation, no MLP; different columns of the flattened graph (hence rows of
W_G) correspond to fixed (sub-graph, vertex, vertex) slots, which is what
makes the embedding vertex-aware.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatchError


def init_projection_params(k_subgraphs: int, joints: int, embed_dim: int,
                           rng) -> dict:
    flat = k_subgraphs * joints * joints
    bound = math.sqrt(6.0 / (flat + embed_dim))
    return {"proj.W_G": rng.uniform(-bound, bound, size=(flat, embed_dim))}


def project_graph(graph, w_g) -> ad.Tensor:
    """graph: (K_S, N, N) -> v: (C_g,). Flatten order: k outer, then row i,
    then column j (plain row-major)."""
    graph = ad.as_tensor(graph)
    w_g = ad.as_tensor(w_g)
    if graph.data.ndim != 3 or graph.data.shape[1] != graph.data.shape[2]:
        raise ShapeMismatchError(f"graph must be (K_S, N, N), got {graph.shape}")
    flat_len = int(np.prod(graph.data.shape))
    if w_g.data.ndim != 2 or w_g.data.shape[0] != flat_len:
        raise ShapeMismatchError(
            f"W_G rows {w_g.shape} do not match flattened graph ({flat_len})")
    return ad.matmul(ad.reshape(graph, (flat_len,)), w_g)
