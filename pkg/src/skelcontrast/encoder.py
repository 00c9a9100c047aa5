"""Adaptive-graph GCN encoder.

Each block builds a per-sequence adaptive graph with K_S=3 sub-graphs
    g^k = A_k + B_k + C_k(X)
where A_k is a fixed degree-normalized piece of the skeleton (identity /
toward-parent / toward-child), B_k is a free trainable adjacency, and C_k(X)
is a data-dependent attention map
    C_k(X) = row_softmax( (mean_t X theta_k)(mean_t X phi_k)^T / sqrt(C_e) ).
The block then applies the graph convolution X_S = sum_k g^k X W_S^k per
frame, a ReLU, a 1-D temporal convolution over frames, and another ReLU.
Global average pooling over (t, n) feeds a linear classifier. The adaptive
graph of the LAST block is returned alongside logits for the contrast branch.

All forward math is written in tape primitives, so gradients come from the
autodiff core and stay finite-difference checkable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import SkeletonSequence, SkeletonTopology
from .errors import BadConfigError

K_SUBGRAPHS = 3


def sub_adjacency(topology: SkeletonTopology) -> np.ndarray:
    """(K_S, N, N) fixed sub-graphs: identity, toward-parent, toward-child.

    The parent/child pieces are row-normalized (D^-1 A); rows without any
    neighbour in that direction stay zero (root has no parent, leaves no
    children).
    """
    n = topology.joint_count
    toward_parent = np.zeros((n, n))
    toward_child = np.zeros((n, n))
    for j in range(n):
        p = topology.parent[j]
        if p != j:
            toward_parent[j, p] = 1.0
            toward_child[p, j] = 1.0
    for mat in (toward_parent, toward_child):
        deg = mat.sum(axis=1, keepdims=True)
        np.divide(mat, deg, out=mat, where=deg > 0)
    return np.stack([np.eye(n), toward_parent, toward_child])


@dataclass
class EncoderArch:
    """Shape-defining hyperparameters; params are built to match."""

    topology: SkeletonTopology
    class_count: int
    in_channels: int = 3
    block_channels: tuple = (8, 16, 32)
    kernel: int = 5
    attn_channels: int = 4
    sub_adj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.class_count < 2:
            raise BadConfigError("need at least 2 classes")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise BadConfigError("temporal kernel must be odd")
        if not self.block_channels or any(c < 1 for c in self.block_channels):
            raise BadConfigError("block channels must be positive")
        if self.attn_channels < 1 or self.in_channels < 1:
            raise BadConfigError("channel sizes must be positive")
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.sub_adj = sub_adjacency(self.topology)

    @property
    def joints(self) -> int:
        return self.topology.joint_count

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1]

    @property
    def num_blocks(self) -> int:
        return len(self.block_channels)


def _xavier(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(arch: EncoderArch, rng) -> dict:
    """Named parameter arrays in declaration order (checkpoint order).

    B_k starts at zero so the initial graphs are skeleton + uniform
    attention; the classifier starts at zero so initial predictions are
    uniform regardless of the encoder state.
    """
    n, c_e = arch.joints, arch.attn_channels
    params = {}
    c_in = arch.in_channels
    for b, c_out in enumerate(arch.block_channels):
        for k in range(K_SUBGRAPHS):
            params[f"block{b}.B{k}"] = np.zeros((n, n))
            params[f"block{b}.theta{k}"] = _xavier(rng, (c_in, c_e), c_in, c_e)
            params[f"block{b}.phi{k}"] = _xavier(rng, (c_in, c_e), c_in, c_e)
            params[f"block{b}.W_S{k}"] = _xavier(rng, (c_in, c_out), c_in, c_out)
        params[f"block{b}.W_T"] = _xavier(
            rng, (c_out, c_out, arch.kernel),
            c_out * arch.kernel, c_out * arch.kernel)
        c_in = c_out
    params["classifier.W"] = np.zeros((arch.feature_dim, arch.class_count))
    return params


def build_adaptive_graph(x, params, arch: EncoderArch, block: int) -> list:
    """K_S per-sequence graph tensors g^k = A_k + B_k + C_k(X), each (N, N)."""
    x = ad.as_tensor(x)
    mean_t = ad.tensor_mean(x, axis=0)  # (N, C_in); one graph per sequence
    scale = 1.0 / math.sqrt(arch.attn_channels)
    graphs = []
    for k in range(K_SUBGRAPHS):
        q = ad.matmul(mean_t, params[f"block{block}.theta{k}"])
        kk = ad.matmul(mean_t, params[f"block{block}.phi{k}"])
        att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose2d(kk)), scale), axis=-1)
        fixed = ad.as_tensor(arch.sub_adj[k])
        graphs.append(ad.add(ad.add(fixed, params[f"block{block}.B{k}"]), att))
    return graphs


def graph_convolution(x, graphs, weights) -> ad.Tensor:
    """X_S = sum_k g^k X W_S^k, applied per frame: (N,N) @ (T,N,C) @ (C,C')."""
    out = None
    for g, w in zip(graphs, weights):
        term = ad.matmul(ad.matmul(g, x), w)
        out = term if out is None else ad.add(out, term)
    return out


def temporal_convolution(x, w) -> ad.Tensor:
    return ad.temporal_conv1d(x, w)


@dataclass
class ForwardOutput:
    logits: ad.Tensor       # (C_k,)
    feature: ad.Tensor      # (C_feat,)
    graph: ad.Tensor        # (K_S, N, N) adaptive graph of the last block


def forward(seq, params, arch: EncoderArch) -> ForwardOutput:
    """Full encoder pass for one sequence (a SkeletonSequence or (T,N,C))."""
    frames = seq.frames if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    if frames.shape[1] != arch.joints or frames.shape[2] != arch.in_channels:
        raise BadConfigError(
            f"sequence shape {frames.shape} does not match arch "
            f"(N={arch.joints}, C={arch.in_channels})")
    x = ad.as_tensor(frames)
    last_graphs = None
    for b in range(arch.num_blocks):
        graphs = build_adaptive_graph(x, params, arch, b)
        w_s = [params[f"block{b}.W_S{k}"] for k in range(K_SUBGRAPHS)]
        x = ad.relu(graph_convolution(x, graphs, w_s))
        x = ad.relu(temporal_convolution(x, params[f"block{b}.W_T"]))
        last_graphs = graphs
    feature = ad.tensor_mean(x, axis=(0, 1))  # GAP over frames and joints
    logits = ad.matmul(feature, params["classifier.W"])
    n = arch.joints
    graph = ad.concat([ad.reshape(g, (1, n, n)) for g in last_graphs], axis=0)
    return ForwardOutput(logits=logits, feature=feature, graph=graph)


def cross_entropy(logits: ad.Tensor, label: int) -> ad.Tensor:
    """-log softmax(logits)[label], via a constant-shift logsumexp.

    The shift constant cancels exactly in the loss value, so using the
    current max as a plain (undifferentiated) constant is both stable and
    gradient-correct.
    """
    logits = ad.as_tensor(logits)
    if logits.data.ndim != 1:
        raise BadConfigError(f"logits must be a vector, got {logits.shape}")
    if not 0 <= label < logits.data.shape[0]:
        raise BadConfigError(f"label {label} out of range")
    shift = float(np.max(logits.data))
    shifted = ad.add(logits, ad.as_tensor(-shift))
    lse = ad.log(ad.tensor_sum(ad.exp(shifted)))
    picked = ad.tensor_sum(ad.gather(shifted, [label]))
    return ad.add(lse, ad.mul(picked, -1.0))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy softmax for evaluation-time probabilities."""
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()
