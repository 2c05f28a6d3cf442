"""Independent reference implementations used only by the tests.

Deliberately naive: explicit loops over edges, walks and pairs, plain Python
floats where possible. None of them share code with the package.
"""

import math

import numpy as np


def haversine_literal(lat1, lon1, lat2, lon2, radius=6371.0):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.atan2(math.sqrt(a), math.sqrt(1 - a))


def brute_geo_edges(lat, lon, delta, max_degree=None):
    """Set of undirected edges {(i, j): d} by pairwise scan + nearest capping."""
    n = len(lat)
    nbrs = {i: [] for i in range(n)}
    for i in range(n):
        for j in range(n):
            if i != j:
                d = haversine_literal(lat[i], lon[i], lat[j], lon[j])
                if d < delta:
                    nbrs[i].append((d, j))
    edges = {}
    for i in range(n):
        cand = sorted(nbrs[i])
        if max_degree is not None:
            cand = cand[:max_degree]
        for d, j in cand:
            edges[(min(i, j), max(i, j))] = d
    return edges


def walk_kernel_enumerate(adj_g, adj_f, sim, p):
    """Sum over all simultaneous length-p walks (v0,v0')->...->(vp,vp') of
    sim[v0,v0'] * prod A_G * prod A_F * sim[vp,vp'], by recursion."""
    adj_g = [[float(x) for x in row] for row in np.asarray(adj_g)]
    adj_f = [[float(x) for x in row] for row in np.asarray(adj_f)]
    sim = [[float(x) for x in row] for row in np.asarray(sim)]
    n, m = len(adj_g), len(adj_f)

    def walks(v, w, steps):
        if steps == 0:
            return sim[v][w]
        total = 0.0
        for u in range(n):
            if adj_g[v][u] == 0.0:
                continue
            for x in range(m):
                if adj_f[w][x] == 0.0:
                    continue
                total += adj_g[v][u] * adj_f[w][x] * walks(u, x, steps - 1)
        return total

    return sum(sim[v][w] * walks(v, w, p) for v in range(n) for w in range(m))


def message_pass_loops(x, weights, edges, num_nodes, slope=0.01, scale=1.0):
    """Literal per-edge message passing. ``edges`` = {(i, j): d} undirected."""
    nbrs = {i: [] for i in range(num_nodes)}
    for (i, j), d in edges.items():
        nbrs[i].append((j, d))
        nbrs[j].append((i, d))
    h = np.array(x, dtype=np.float64)
    for w in weights:
        w = np.asarray(w, dtype=np.float64)
        new = np.zeros_like(h)
        for j in range(num_nodes):
            msg = w @ h[j]  # self-message
            for i, d in nbrs[j]:
                norm = 1.0 / math.sqrt(len(nbrs[i]) * len(nbrs[j]))
                msg = msg + norm * math.exp(-((d / scale) ** 2)) * (w @ h[i])
            new[j] = np.where(msg > 0, msg, slope * msg)
        h = new
    return h


def attention_pool_loops(h, q, k, v, heads):
    """Per-item multi-head pooling with explicit per-row scoring."""
    h = np.asarray(h, dtype=np.float64)
    dim = h.shape[1]
    dh = dim // heads
    out = []
    for r in range(heads):
        qr, kr, vr = q[r * dh:(r + 1) * dh], k[r * dh:(r + 1) * dh], v[r * dh:(r + 1) * dh]
        scores = [float((qr @ row) @ (kr @ row)) / math.sqrt(dim / heads) for row in h]
        mx = max(scores)
        e = [math.exp(s - mx) for s in scores]
        z = sum(e)
        out.append(sum((ei / z) * (vr @ row) for ei, row in zip(e, h)))
    return np.concatenate(out)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q))


def central_difference(f, tensor, index, eps=1e-6):
    """d f / d tensor[index] by central differences; f returns a scalar tensor."""
    import torch

    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + eps
        up = f().item()
        tensor[index] = orig - eps
        down = f().item()
        tensor[index] = orig
    return (up - down) / (2 * eps)
