"""Random-walk graph kernels between sequential graphs and trainable filters.

A walk on the direct product of ``G`` (n nodes) and a filter ``F`` (m nodes)
is a simultaneous walk on both. With ``S[v, v'] = <x_v, x'_v'>`` the
``p``-step kernel is ``vec(S)^T (A_G ⊗ A_F)^p vec(S)``; the encoder applies
the Kronecker operator in factored form, ``Z <- A_G Z A_F^T``, so the
(nm)x(nm) product matrix is never built.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def product_adjacency(graph_adj, graph_feats, filter_adj, filter_feats, uniform=False):
    """Explicit direct-product adjacency (sparse) and similarity vector.

    Product node ``(v, v')`` has index ``v * m + v'``.
    """
    graph_adj = torch.as_tensor(graph_adj)
    filter_adj = torch.as_tensor(filter_adj)
    n, m = graph_adj.shape[0], filter_adj.shape[0]
    dtype = filter_adj.dtype if filter_adj.is_floating_point() else torch.float64
    a_x = torch.kron(graph_adj.to(dtype), filter_adj.to(dtype)).to_sparse()
    if uniform:
        s = torch.ones(n * m, dtype=dtype)
    else:
        s = (torch.as_tensor(graph_feats) @ torch.as_tensor(filter_feats).T).reshape(n * m)
    return a_x, s


def walk_kernel(a_x, s, max_step, normalize=True):
    """``[s^T A^p s for p in 0..max_step]`` by repeated sparse mat-vec products,
    each divided by the product-node count when ``normalize``."""
    out = []
    z = s
    for p in range(max_step + 1):
        if p:
            z = torch.sparse.mm(a_x, z[:, None])[:, 0] if a_x.is_sparse else a_x @ z
        out.append(s @ z)
    k = torch.stack(out)
    return k / s.shape[0] if normalize else k


class GraphFilterBank(nn.Module):
    """``num_filters`` small trainable graphs with node features.

    Effective adjacency is ``sigmoid((Θ + Θᵀ)/2)`` with the diagonal zeroed.
    """

    def __init__(self, num_filters=8, filter_nodes=4, dim=64, init_std=0.1):
        super().__init__()
        if filter_nodes < 2:
            raise ValueError("filters need at least 2 nodes")
        self.num_filters = num_filters
        self.filter_nodes = filter_nodes
        self.theta = nn.Parameter(torch.randn(num_filters, filter_nodes, filter_nodes) * init_std)
        self.features = nn.Parameter(torch.randn(num_filters, filter_nodes, dim) / math.sqrt(dim))

    def adjacency(self):
        sym = 0.5 * (self.theta + self.theta.transpose(-1, -2))
        eye = torch.eye(self.filter_nodes, dtype=sym.dtype, device=sym.device)
        return torch.sigmoid(sym) * (1 - eye)


class SeqKernelEncoder(nn.Module):
    """Walk-kernel matrix H (N x (P+1)) per sequential graph, flattened row-major
    and mapped to ``dim`` by an affine readout."""

    def __init__(self, dim=64, num_filters=8, filter_nodes=4, max_step=3, uniform_features=False):
        super().__init__()
        self.dim = dim
        self.max_step = max_step
        self.uniform_features = uniform_features
        self.filters = GraphFilterBank(num_filters, filter_nodes, dim)
        self.readout = nn.Linear(num_filters * (max_step + 1), dim)

    def kernel_matrix(self, adj, node_feats, n_nodes):
        """Batched kernels.

        adj: (B, n, n) binary directed adjacency, zero-padded.
        node_feats: (B, n, D) POI embeddings, padding rows arbitrary.
        n_nodes: (B,) true node counts.
        Returns (B, N, P+1).
        """
        b, n = adj.shape[:2]
        a_f = self.filters.adjacency()  # (N, m, m)
        m = a_f.shape[-1]
        mask = (torch.arange(n, device=adj.device)[None, :] < n_nodes[:, None]).to(a_f.dtype)
        if self.uniform_features:
            s = mask[:, None, :, None].expand(b, a_f.shape[0], n, m)
        else:
            s = torch.einsum("bvd,kwd->bkvw", node_feats, self.filters.features)
            s = s * mask[:, None, :, None]
        adj = adj.to(a_f.dtype)[:, None]  # (B, 1, n, n)
        a_f_t = a_f.transpose(-1, -2)[None]  # (1, N, m, m)
        z = s
        out = [(s * z).sum((-1, -2))]
        for _ in range(self.max_step):
            z = torch.matmul(torch.matmul(adj, z), a_f_t)
            out.append((s * z).sum((-1, -2)))
        k = torch.stack(out, dim=-1)
        count = (n_nodes.to(k.dtype) * m)[:, None, None]
        return k / count

    def forward(self, adj, node_feats, n_nodes):
        h = self.kernel_matrix(adj, node_feats, n_nodes)
        return self.readout(h.flatten(1))


def encode_sequence(graph, encoder: SeqKernelEncoder, embedding):
    """e_s for a single ``UserSeqGraph`` using rows of ``embedding``."""
    adj = torch.as_tensor(graph.adjacency, dtype=embedding.dtype)[None]
    feats = embedding[torch.as_tensor(graph.node_pois, dtype=torch.long)][None]
    n = torch.tensor([graph.num_nodes])
    return encoder(adj, feats, n)[0]
