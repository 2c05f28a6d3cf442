"""Synthetic check-in logs in the Foursquare TSV layout.

Users have a home neighbourhood, a handful of routine venues visited in a
fixed cycle, and otherwise wander to venues near their current position.
Useful for tests and demos; it is not a substitute for the real dumps.
"""

from __future__ import annotations

import numpy as np

from .data import CheckinSequence, PoiRecord, write_foursquare
from .graphs import haversine_matrix

NYC_BOUNDS = (40.55, 40.90, -74.05, -73.75)  # lat_min, lat_max, lon_min, lon_max


def synthetic_checkins(n_users=200, n_pois=3000, mean_length=120, n_hoods=40,
                       bounds=NYC_BOUNDS, seed=0):
    """Return ``(pois, sequences)`` for a synthetic city."""
    rng = np.random.default_rng(seed)
    lat0, lat1, lon0, lon1 = bounds
    hood_lat = rng.uniform(lat0, lat1, n_hoods)
    hood_lon = rng.uniform(lon0, lon1, n_hoods)
    hood = rng.integers(0, n_hoods, n_pois)
    lat = np.clip(hood_lat[hood] + rng.normal(0, 0.006, n_pois), lat0, lat1)
    lon = np.clip(hood_lon[hood] + rng.normal(0, 0.008, n_pois), lon0, lon1)
    pois = [PoiRecord(f"v{k:05d}", k, float(lon[k]), float(lat[k])) for k in range(n_pois)]
    popularity = 1.0 / np.arange(1, n_pois + 1) ** 0.6
    popularity = popularity[rng.permutation(n_pois)]

    dist = haversine_matrix(lat, lon)
    near = np.argsort(dist, axis=1)[:, 1:26]  # 25 nearest venues

    sequences = []
    for u in range(n_users):
        home = rng.integers(0, n_hoods)
        local = np.flatnonzero(hood == home)
        if len(local) < 4:
            local = np.argsort(np.hypot(lat - hood_lat[home], lon - hood_lon[home]))[:8]
        routine_len = rng.integers(3, 6)
        w = popularity[local] / popularity[local].sum()
        routine = rng.choice(local, size=min(routine_len, len(local)), replace=False, p=w)
        length = max(5, int(rng.poisson(mean_length)))
        visits = [int(routine[0])]
        r_pos = 0
        for _ in range(length - 1):
            cur = visits[-1]
            x = rng.random()
            if x < 0.5:
                r_pos = (r_pos + 1) % len(routine)
                nxt = int(routine[r_pos])
            elif x < 0.9:
                cand = near[cur]
                pw = popularity[cand] / popularity[cand].sum()
                nxt = int(rng.choice(cand, p=pw))
            else:
                nxt = int(rng.choice(local))
            if nxt != cur:
                visits.append(nxt)
        t = 1334275200 + np.cumsum(rng.integers(1800, 6 * 3600, len(visits)))
        sequences.append(CheckinSequence(u, np.asarray(visits, np.int64), t.astype(np.int64), f"u{u}"))
    return pois, sequences


def write_synthetic_tsv(path, **kwargs):
    pois, sequences = synthetic_checkins(**kwargs)
    write_foursquare(path, pois, sequences)
    return pois, sequences
