"""Distance-kernel message passing over the POI graph and attention pooling."""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from torch import nn

from .graphs import GeoGraph


def distance_weight(d, scale=1.0):
    """exp(-(d/scale)^2); ``d`` in km. Works on floats, arrays and tensors."""
    if isinstance(d, torch.Tensor):
        return torch.exp(-(d / scale) ** 2)
    return np.exp(-(np.asarray(d, dtype=np.float64) / scale) ** 2)


def propagation_matrix(graph: GeoGraph, distance_scale=1.0) -> sp.csr_matrix:
    """Row ``j`` holds the coefficients node ``j`` gathers: 1 on the diagonal
    (self-message) plus ``w(d_ij) / sqrt(|N_i| |N_j|)`` per neighbour ``i``."""
    n = graph.num_nodes
    deg = graph.degree.astype(np.float64)
    coef = distance_weight(graph.distance, distance_scale) / np.sqrt(deg[graph.src] * deg[graph.dst])
    # row = receiver (dst), column = sender (src)
    m = sp.csr_matrix((coef, (graph.dst, graph.src)), shape=(n, n)) + sp.identity(n, format="csr")
    m.sort_indices()
    return m.tocsr()


def _to_torch_sparse(m: sp.spmatrix, dtype) -> torch.Tensor:
    m = m.tocoo()
    idx = torch.from_numpy(np.vstack([m.row, m.col]).astype(np.int64))
    val = torch.from_numpy(m.data).to(dtype)
    return torch.sparse_coo_tensor(idx, val, m.shape, check_invariants=False).coalesce()


class GeoEncoder(nn.Module):
    """POI embedding table plus ``num_layers`` rounds of geo message passing.

    ``forward(nodes)`` returns layer-L rows for the sorted unique ``nodes``
    using the exact L-hop neighbourhood; ``forward(None)`` returns all rows.
    """

    def __init__(self, num_pois, dim=64, num_layers=2, negative_slope=0.01,
                 distance_scale=1.0, dropout=0.0, full_graph_fraction=0.3):
        super().__init__()
        self.num_pois = num_pois
        self.dim = dim
        self.num_layers = num_layers
        self.negative_slope = negative_slope
        self.distance_scale = distance_scale
        self.dropout = dropout
        self.full_graph_fraction = full_graph_fraction
        self.embedding = nn.Parameter(torch.randn(num_pois, dim) / math.sqrt(dim))
        self.layers = nn.ModuleList(nn.Linear(dim, dim, bias=False) for _ in range(num_layers))
        self._prop = None
        self._prop_torch = None

    def set_graph(self, graph: GeoGraph):
        if graph.num_nodes != self.num_pois:
            raise ValueError(f"graph has {graph.num_nodes} nodes, model has {self.num_pois} POIs")
        self._prop = propagation_matrix(graph, self.distance_scale)
        self._prop_torch = None
        return self

    def _full_prop(self):
        dtype = self.embedding.dtype
        if self._prop_torch is None or self._prop_torch.dtype != dtype:
            self._prop_torch = _to_torch_sparse(self._prop, dtype)
        return self._prop_torch

    def _layer(self, l, h):
        h = self.layers[l](h)
        if self.dropout and self.training:
            h = F.dropout(h, self.dropout)
        return h

    def hop_sets(self, nodes):
        """``sets[k]`` = sorted nodes within ``k`` hops of ``nodes``."""
        sets = [np.unique(np.asarray(nodes, dtype=np.int64))]
        adj = self._prop
        for _ in range(self.num_layers):
            cur = sets[-1]
            if len(cur) == self.num_pois:
                sets.append(cur)
                continue
            reach = adj[cur].indices
            sets.append(np.union1d(cur, reach))
        return sets

    def forward(self, nodes=None):
        x = self.embedding
        if self.num_layers == 0:
            return x if nodes is None else x[torch.as_tensor(np.unique(nodes))]
        if self._prop is None:
            raise RuntimeError("call set_graph() before message passing")

        if nodes is None:
            sets = None
        else:
            sets = self.hop_sets(nodes)
            if len(sets[-1]) > self.full_graph_fraction * self.num_pois:
                sets = None
        if sets is None:
            prop = self._full_prop()
            h = x
            for l in range(self.num_layers):
                h = F.leaky_relu(torch.sparse.mm(prop, self._layer(l, h)), self.negative_slope)
            return h if nodes is None else h[torch.as_tensor(np.unique(nodes))]

        L = self.num_layers
        h = x[torch.from_numpy(sets[L])]
        for l in range(L):
            rows, cols = sets[L - l - 1], sets[L - l]
            block = _to_torch_sparse(self._prop[rows][:, cols], x.dtype)
            h = F.leaky_relu(torch.sparse.mm(block, self._layer(l, h)), self.negative_slope)
        return h


class AttentionPool(nn.Module):
    """Multi-head pooling of a padded (B, T, D) history into (B, D).

    ``variant="item"`` scores each row against itself, ``(Q h_i)·(K h_i)``,
    then softmaxes over positions. ``variant="pairwise"`` is standard
    self-attention followed by a masked mean.
    """

    def __init__(self, dim=64, heads=4, variant="item"):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        if variant not in ("item", "pairwise"):
            raise ValueError(f"unknown attention variant {variant!r}")
        self.dim = dim
        self.heads = heads
        self.variant = variant
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.dim // self.heads)

    def attention_weights(self, h, mask=None):
        """Per-head item weights, shape (B, T, R); only for ``variant="item"``."""
        q, k = self._split(self.query(h)), self._split(self.key(h))
        scores = (q * k).sum(-1) / math.sqrt(self.dim / self.heads)
        if mask is not None:
            scores = scores.masked_fill(~mask[..., None], float("-inf"))
        return torch.softmax(scores, dim=1)

    def forward(self, h, mask=None):
        if h.dim() == 2:
            return self.forward(h[None], None if mask is None else mask[None])[0]
        if mask is None:
            mask = torch.ones(h.shape[:2], dtype=torch.bool, device=h.device)
        v = self._split(self.value(h))
        if self.variant == "item":
            alpha = self.attention_weights(h, mask)
            out = (alpha[..., None] * v).sum(1)
            return out.reshape(h.shape[0], self.dim)

        q, k = self._split(self.query(h)), self._split(self.key(h))
        scores = torch.einsum("bird,bjrd->brij", q, k) / math.sqrt(self.dim / self.heads)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = torch.einsum("brij,bjrd->bird", attn, v).reshape(h.shape[0], h.shape[1], self.dim)
        m = mask[..., None].to(ctx.dtype)
        return (ctx * m).sum(1) / m.sum(1).clamp_min(1.0)
