"""Geographical POI graph and per-history sequential transition graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import backend

EARTH_RADIUS_KM = 6371.0
GEOGRAPH_FORMAT = "kbgnn-geograph/1"
DEFAULT_DELTA_KM = 0.5
DEFAULT_MAX_DEGREE = 50


def haversine_km(a, b):
    """Great-circle distance in km between ``(lat, lon)`` pairs in degrees."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin(0.5 * (lat2 - lat1)) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin(0.5 * (lon2 - lon1)) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(h, 1.0)))


def haversine_matrix(lat, lon):
    """Dense pairwise distances (km) for degree arrays; O(n^2) memory."""
    lat = np.radians(np.asarray(lat, dtype=np.float64))
    lon = np.radians(np.asarray(lon, dtype=np.float64))
    s1 = np.sin(0.5 * (lat[None, :] - lat[:, None]))
    s2 = np.sin(0.5 * (lon[None, :] - lon[:, None]))
    h = s1 ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * s2 ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


@dataclass
class GeoGraph:
    """Undirected POI graph stored as a symmetric directed edge list."""

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    distance: np.ndarray  # km, same order as src/dst
    delta_d: float = DEFAULT_DELTA_KM
    max_degree: int = DEFAULT_MAX_DEGREE

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.distance = np.asarray(self.distance, dtype=np.float64)
        self._csr = None

    @property
    def degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.num_nodes)

    @property
    def num_edges(self):
        """Undirected edge count."""
        return len(self.src) // 2

    def edges(self):
        """Undirected edges ``(i, j, d)`` with ``i < j``."""
        keep = self.src < self.dst
        return self.src[keep], self.dst[keep], self.distance[keep]

    def csr(self) -> sp.csr_matrix:
        """Sparse distance matrix (structure = adjacency)."""
        if self._csr is None:
            self._csr = sp.csr_matrix((self.distance, (self.src, self.dst)),
                                      shape=(self.num_nodes, self.num_nodes))
            self._csr.sort_indices()
        return self._csr

    def neighbors(self, i):
        m = self.csr()
        return m.indices[m.indptr[i]:m.indptr[i + 1]]

    def permute(self, perm) -> "GeoGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return GeoGraph(self.num_nodes, perm[self.src], perm[self.dst], self.distance.copy(),
                        self.delta_d, self.max_degree)


def _from_pairs(n, i, j, d, delta_d, max_degree) -> GeoGraph:
    """Apply nearest-neighbour degree capping and re-symmetrize by union."""
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    dist = np.concatenate([d, d])
    if max_degree is not None and len(src):
        order = np.lexsort((dst, dist, src))
        src, dst, dist = src[order], dst[order], dist[order]
        starts = np.searchsorted(src, src, side="left")
        rank = np.arange(len(src)) - starts
        keep = rank < max_degree
        a = np.minimum(src[keep], dst[keep])
        b = np.maximum(src[keep], dst[keep])
        pairs, first = np.unique(a * n + b, return_index=True)
        i, j, d = pairs // n, pairs % n, dist[keep][first]
        src = np.concatenate([i, j])
        dst = np.concatenate([j, i])
        dist = np.concatenate([d, d])
    order = np.lexsort((dst, src))
    return GeoGraph(n, src[order], dst[order], dist[order], float(delta_d),
                    -1 if max_degree is None else int(max_degree))


def grid_cells(lat_deg, lon_deg, delta_km):
    """Bucket points into cells no narrower than ``delta_km`` in either axis.

    Returns ``(lat_rad, lon_rad, cell_lat, cell_lon, n_lon)``. Longitude
    columns wrap around the antimeridian.
    """
    lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
    lon = np.radians(np.asarray(lon_deg, dtype=np.float64))
    ang = delta_km / EARTH_RADIUS_KM
    cell_lat = np.floor(lat / ang).astype(np.int64)
    phi_max = min(float(np.abs(lat).max(initial=0.0)) + ang, math.pi / 2)
    ratio = math.sin(0.5 * min(ang, math.pi)) / max(math.cos(phi_max), 1e-300)
    if ratio >= 1.0:
        n_lon = 1
    else:
        n_lon = max(1, int(math.floor(2 * math.pi / (2 * math.asin(ratio)))))
    width = 2 * math.pi / n_lon
    cell_lon = np.minimum(np.floor((lon + math.pi) / width).astype(np.int64), n_lon - 1)
    return lat, lon, cell_lat, cell_lon, n_lon


def build_geo_graph(pois, delta_d=DEFAULT_DELTA_KM, max_degree=DEFAULT_MAX_DEGREE) -> GeoGraph:
    """Connect POIs closer than ``delta_d`` km (strict), capped at ``max_degree``."""
    if delta_d <= 0:
        raise ValueError("delta_d must be positive")
    lat, lon = _coords(pois)
    n = len(lat)
    if n == 0:
        return GeoGraph(0, [], [], [], float(delta_d), int(max_degree or -1))
    lat_r, lon_r, cl, cn, n_lon = grid_cells(lat, lon, delta_d)
    i, j, d = backend.radius_pairs(lat_r, lon_r, cl, cn, n_lon, True, float(delta_d))
    return _from_pairs(n, np.asarray(i), np.asarray(j), np.asarray(d), delta_d, max_degree)


def build_geo_graph_bruteforce(pois, delta_d=DEFAULT_DELTA_KM, max_degree=DEFAULT_MAX_DEGREE) -> GeoGraph:
    """O(n^2) reference construction."""
    lat, lon = _coords(pois)
    n = len(lat)
    dm = haversine_matrix(lat, lon)
    i, j = np.nonzero(np.triu(dm < delta_d, k=1))
    return _from_pairs(n, i, j, dm[i, j], delta_d, max_degree)


def _coords(pois):
    if isinstance(pois, tuple) and len(pois) == 2:
        return np.asarray(pois[0], np.float64), np.asarray(pois[1], np.float64)
    lat = np.array([p.lat for p in pois], dtype=np.float64)
    lon = np.array([p.lon for p in pois], dtype=np.float64)
    return lat, lon


def save_geo_graph(graph: GeoGraph, path):
    i, j, d = graph.edges()
    header = (f"format={GEOGRAPH_FORMAT}\tnum_nodes={graph.num_nodes}\t"
              f"delta_d={graph.delta_d!r}\tmax_degree={graph.max_degree}\ncolumns=i\tj\tdistance_km")
    with open(path, "w") as fh:
        fh.write("".join(f"# {line}\n" for line in header.split("\n")))
        for a, b, c in zip(i.tolist(), j.tolist(), d.tolist()):
            fh.write(f"{a}\t{b}\t{c!r}\n")


def load_geo_graph(path) -> GeoGraph:
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].strip().split("\t"):
                    key, _, val = tok.partition("=")
                    meta[key] = val
                continue
            a, b, c = line.split("\t")
            rows.append((int(a), int(b), float(c)))
    if meta.get("format") != GEOGRAPH_FORMAT:
        raise ValueError(f"{path}: not a {GEOGRAPH_FORMAT} file")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    i, j = arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    dist = np.concatenate([arr[:, 2], arr[:, 2]])
    order = np.lexsort((dst, src))
    return GeoGraph(int(meta["num_nodes"]), src[order], dst[order], dist[order],
                    float(meta["delta_d"]), int(meta["max_degree"]))


# ------------------------------------------------------------ sequential graph


@dataclass
class UserSeqGraph:
    node_pois: list  # distinct POIs in first-visit order
    adjacency: np.ndarray  # binary, directed: [i, j] = 1 iff i -> j observed

    @property
    def directed_edges(self):
        return {(int(a), int(b)) for a, b in zip(*np.nonzero(self.adjacency))}

    @property
    def num_nodes(self):
        return len(self.node_pois)


@dataclass
class SeqGraphBatch:
    node_pois: np.ndarray  # (B, n_max), -1 padded
    n_nodes: np.ndarray  # (B,)
    adjacency: np.ndarray  # (B, n_max, n_max)

    def __len__(self):
        return len(self.n_nodes)

    def __getitem__(self, b) -> UserSeqGraph:
        n = int(self.n_nodes[b])
        return UserSeqGraph(self.node_pois[b, :n].tolist(), self.adjacency[b, :n, :n].copy())


def build_seq_graph_batch(flat, offsets, num_pois=None) -> SeqGraphBatch:
    flat = np.ascontiguousarray(flat, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if num_pois is None:
        num_pois = int(flat.max()) + 1 if len(flat) else 1
    node_pois, n_nodes, adj = backend.seq_graph_batch(flat, offsets, int(num_pois))
    return SeqGraphBatch(node_pois, n_nodes, adj)


def build_seq_graph(history) -> UserSeqGraph:
    history = np.asarray(history, dtype=np.int64)
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    return build_seq_graph_batch(history, np.array([0, len(history)]))[0]
