# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for graph construction.

Both functions mirror ``kbgnn._pycore`` exactly; the package picks one of the
two at import time (see ``kbgnn.backend``).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport asin, cos, sin, sqrt

cnp.import_array()

cdef double EARTH_RADIUS_KM = 6371.0


cdef inline double _haversine(double lat1, double lon1, double lat2, double lon2) noexcept nogil:
    cdef double s1 = sin(0.5 * (lat2 - lat1))
    cdef double s2 = sin(0.5 * (lon2 - lon1))
    cdef double h = s1 * s1 + cos(lat1) * cos(lat2) * s2 * s2
    if h > 1.0:
        h = 1.0
    return 2.0 * EARTH_RADIUS_KM * asin(sqrt(h))


cdef inline Py_ssize_t _lower_bound(const cnp.int64_t[:] keys, cnp.int64_t key) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


def radius_pairs(
    const double[:] lat_rad,
    const double[:] lon_rad,
    const cnp.int64_t[:] cell_lat,
    const cnp.int64_t[:] cell_lon,
    cnp.int64_t n_lon,
    bint wrap,
    double delta_km,
):
    """All pairs (i < j) with great-circle distance strictly below ``delta_km``.

    Points are bucketed into cells at least ``delta_km`` wide, so every
    qualifying pair lies in the same or an adjacent cell.
    """
    cdef Py_ssize_t n = lat_rad.shape[0]
    keys_np = np.asarray(cell_lat, dtype=np.int64) * n_lon + np.asarray(cell_lon, dtype=np.int64)
    order_np = np.argsort(keys_np, kind="stable").astype(np.int64)
    sorted_keys_np = keys_np[order_np]
    cdef const cnp.int64_t[:] order = order_np
    cdef const cnp.int64_t[:] sorted_keys = sorted_keys_np

    cdef Py_ssize_t cap = max(16, 8 * n)
    out_i_np = np.empty(cap, dtype=np.int64)
    out_j_np = np.empty(cap, dtype=np.int64)
    out_d_np = np.empty(cap, dtype=np.float64)
    cdef cnp.int64_t[:] out_i = out_i_np
    cdef cnp.int64_t[:] out_j = out_j_np
    cdef double[:] out_d = out_d_np
    cdef Py_ssize_t count = 0

    cdef cnp.int64_t nbr_keys[9]
    cdef int n_nbr, a, b, c
    cdef bint seen
    cdef cnp.int64_t cl, cn, key
    cdef Py_ssize_t p, q, idx, start
    cdef double d

    for p in range(n):
        n_nbr = 0
        for a in range(-1, 2):
            for b in range(-1, 2):
                cn = cell_lon[p] + b
                if wrap:
                    cn = ((cn % n_lon) + n_lon) % n_lon
                elif cn < 0 or cn >= n_lon:
                    continue
                key = (cell_lat[p] + a) * n_lon + cn
                seen = False
                for c in range(n_nbr):
                    if nbr_keys[c] == key:
                        seen = True
                        break
                if not seen:
                    nbr_keys[n_nbr] = key
                    n_nbr += 1
        for c in range(n_nbr):
            key = nbr_keys[c]
            start = _lower_bound(sorted_keys, key)
            idx = start
            while idx < n and sorted_keys[idx] == key:
                q = order[idx]
                idx += 1
                if q <= p:
                    continue
                d = _haversine(lat_rad[p], lon_rad[p], lat_rad[q], lon_rad[q])
                if d < delta_km:
                    if count == cap:
                        cap *= 2
                        out_i_np = np.resize(out_i_np, cap)
                        out_j_np = np.resize(out_j_np, cap)
                        out_d_np = np.resize(out_d_np, cap)
                        out_i = out_i_np
                        out_j = out_j_np
                        out_d = out_d_np
                    out_i[count] = p
                    out_j[count] = q
                    out_d[count] = d
                    count += 1
    return out_i_np[:count].copy(), out_j_np[:count].copy(), out_d_np[:count].copy()


def seq_graph_batch(
    const cnp.int64_t[:] flat,
    const cnp.int64_t[:] offsets,
    cnp.int64_t num_pois,
):
    """Directed transition graphs for a batch of ragged histories.

    Returns ``(node_pois, n_nodes, adjacency)`` where ``node_pois`` is padded
    with -1 and nodes appear in first-visit order.
    """
    cdef Py_ssize_t batch = offsets.shape[0] - 1
    cdef Py_ssize_t b, k, lo, hi, n_max = 0
    cdef cnp.int64_t poi, prev_local, cur_local, n_local

    stamp_np = np.full(num_pois, -1, dtype=np.int64)
    local_np = np.zeros(num_pois, dtype=np.int64)
    cdef cnp.int64_t[:] stamp = stamp_np
    cdef cnp.int64_t[:] local = local_np

    n_nodes_np = np.zeros(batch, dtype=np.int64)
    cdef cnp.int64_t[:] n_nodes = n_nodes_np
    for b in range(batch):
        lo = offsets[b]
        hi = offsets[b + 1]
        n_local = 0
        for k in range(lo, hi):
            poi = flat[k]
            if stamp[poi] != b:
                stamp[poi] = b
                n_local += 1
        n_nodes[b] = n_local
        if n_local > n_max:
            n_max = n_local

    node_np = np.full((batch, n_max), -1, dtype=np.int64)
    adj_np = np.zeros((batch, n_max, n_max), dtype=np.float64)
    cdef cnp.int64_t[:, :] node_pois = node_np
    cdef double[:, :, :] adj = adj_np
    stamp_np.fill(-1)

    for b in range(batch):
        lo = offsets[b]
        hi = offsets[b + 1]
        n_local = 0
        prev_local = -1
        for k in range(lo, hi):
            poi = flat[k]
            if stamp[poi] != b:
                stamp[poi] = b
                local[poi] = n_local
                node_pois[b, n_local] = poi
                n_local += 1
            cur_local = local[poi]
            if prev_local >= 0 and prev_local != cur_local:
                adj[b, prev_local, cur_local] = 1.0
            prev_local = cur_local
    return node_np, n_nodes_np, adj_np
