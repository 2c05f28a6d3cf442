"""Pure-Python/numpy versions of the kernels in ``_core.pyx``.

Same signatures and outputs; used when the compiled extension is missing or
``KBGNN_PURE_PYTHON=1`` is set.
"""

from collections import defaultdict

import numpy as np

EARTH_RADIUS_KM = 6371.0


def _haversine_rad(lat1, lon1, lat2, lon2):
    s1 = np.sin(0.5 * (lat2 - lat1))
    s2 = np.sin(0.5 * (lon2 - lon1))
    h = np.minimum(s1 * s1 + np.cos(lat1) * np.cos(lat2) * s2 * s2, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))


def radius_pairs(lat_rad, lon_rad, cell_lat, cell_lon, n_lon, wrap, delta_km):
    lat_rad = np.asarray(lat_rad, dtype=np.float64)
    lon_rad = np.asarray(lon_rad, dtype=np.float64)
    cells = defaultdict(list)
    for p, key in enumerate(zip(cell_lat.tolist(), cell_lon.tolist())):
        cells[key].append(p)
    cells = {k: np.asarray(v, dtype=np.int64) for k, v in cells.items()}

    out_i, out_j, out_d = [], [], []
    for (cl, cn), members in cells.items():
        nbr = set()
        for a in (-1, 0, 1):
            for b in (-1, 0, 1):
                c = cn + b
                if wrap:
                    c %= n_lon
                elif c < 0 or c >= n_lon:
                    continue
                nbr.add((cl + a, c))
        others = [cells[k] for k in nbr if k in cells]
        if not others:
            continue
        cand = np.concatenate(others)
        d = _haversine_rad(
            lat_rad[members][:, None], lon_rad[members][:, None],
            lat_rad[cand][None, :], lon_rad[cand][None, :],
        )
        ii, jj = np.nonzero((d < delta_km) & (members[:, None] < cand[None, :]))
        out_i.append(members[ii])
        out_j.append(cand[jj])
        out_d.append(d[ii, jj])

    if not out_i:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float64)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_d)


def seq_graph_batch(flat, offsets, num_pois):
    flat = np.asarray(flat, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    batch = len(offsets) - 1
    graphs = []
    for b in range(batch):
        local = {}
        edges = set()
        prev = -1
        for poi in flat[offsets[b]:offsets[b + 1]].tolist():
            cur = local.setdefault(poi, len(local))
            if prev >= 0 and prev != cur:
                edges.add((prev, cur))
            prev = cur
        graphs.append((list(local), edges))

    n_max = max((len(nodes) for nodes, _ in graphs), default=0)
    node_pois = np.full((batch, n_max), -1, dtype=np.int64)
    n_nodes = np.zeros(batch, dtype=np.int64)
    adj = np.zeros((batch, n_max, n_max), dtype=np.float64)
    for b, (nodes, edges) in enumerate(graphs):
        n_nodes[b] = len(nodes)
        node_pois[b, :len(nodes)] = nodes
        for u, v in edges:
            adj[b, u, v] = 1.0
    return node_pois, n_nodes, adj
