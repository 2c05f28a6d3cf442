import importlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbgnn import _pycore, backend
from kbgnn.graphs import (build_geo_graph, build_geo_graph_bruteforce, build_seq_graph,
                          build_seq_graph_batch, grid_cells, haversine_km, load_geo_graph,
                          save_geo_graph)

from oracles import brute_geo_edges, haversine_literal


def _as_dict(g):
    i, j, d = g.edges()
    return {(int(a), int(b)): float(c) for a, b, c in zip(i, j, d)}


def _random_city(n, seed, spread=0.02, center=(40.73, -73.99)):
    rng = np.random.default_rng(seed)
    return center[0] + spread * rng.standard_normal(n), center[1] + spread * rng.standard_normal(n)


# ------------------------------------------------------------ haversine


def test_haversine_one_degree_on_equator():
    assert haversine_km((0, 0), (0, 1)) == pytest.approx(111.19492664455873, abs=1e-9)


def test_haversine_zero_and_symmetric():
    a, b = (40.7, -74.0), (35.68, 139.69)
    assert haversine_km(a, a) == 0.0
    assert haversine_km(a, b) == haversine_km(b, a)
    assert haversine_km(a, b) == pytest.approx(haversine_literal(*a, *b), rel=1e-12)


# ------------------------------------------------------------ geographical graph


def test_threshold_is_strict():
    # two points ~0.3 km apart connect at 0.5, two at ~0.8 km do not
    lat0 = 40.0
    dlat = 0.3 / 111.19492664455873
    g = build_geo_graph(([lat0, lat0 + dlat, lat0 + 4 * dlat], [0.0, 0.0, 0.0]), 0.5)
    assert set(_as_dict(g)) == {(0, 1)}
    d01 = haversine_km((lat0, 0), (lat0 + dlat, 0))
    assert build_geo_graph(([lat0, lat0 + dlat], [0, 0]), d01).num_edges == 0
    assert build_geo_graph(([lat0, lat0 + dlat], [0, 0]), d01 * (1 + 1e-9)).num_edges == 1


def test_colocated_pois_capped_like_bruteforce():
    lat = [40.0] * 5 + [40.001]
    lon = [-74.0] * 5 + [-74.0]
    g = build_geo_graph((lat, lon), 0.5, max_degree=2)
    assert _as_dict(g) == pytest.approx(brute_geo_edges(lat, lon, 0.5, 2))
    assert np.all(np.isfinite(g.distance))


@pytest.mark.parametrize("seed", range(5))
def test_matches_bruteforce_oracle(seed):
    lat, lon = _random_city(300, seed)
    ref = brute_geo_edges(lat.tolist(), lon.tolist(), 0.5, 10)
    got = _as_dict(build_geo_graph((lat, lon), 0.5, 10))
    assert set(got) == set(ref)
    for k in ref:
        assert got[k] == pytest.approx(ref[k], abs=1e-9)


def test_matches_vectorized_bruteforce_at_1000():
    lat, lon = _random_city(1000, 11, spread=0.03)
    a = build_geo_graph((lat, lon), 0.5, 50)
    b = build_geo_graph_bruteforce((lat, lon), 0.5, 50)
    assert np.array_equal(a.src, b.src) and np.array_equal(a.dst, b.dst)
    assert np.allclose(a.distance, b.distance, rtol=1e-12)


def test_degree_cap_and_symmetry():
    lat, lon = _random_city(800, 3, spread=0.005)
    g = build_geo_graph((lat, lon), 0.5, 7)
    m = g.csr()
    assert (m != m.T).nnz == 0
    assert np.all(g.src != g.dst)
    full = build_geo_graph((lat, lon), 0.5, None)
    top = {}
    for i in range(800):
        nb = full.neighbors(i)
        d = full.csr()[i, nb].toarray().ravel()
        top[i] = set(nb[np.lexsort((nb, d))][:7].tolist())
    for a, b, _ in zip(*g.edges()):
        assert b in top[a] or a in top[b]
    assert np.all(g.degree >= np.minimum(full.degree, 7))


def test_insertion_order_invariance():
    lat, lon = _random_city(400, 5)
    perm = np.random.default_rng(0).permutation(400)
    g = build_geo_graph((lat, lon), 0.5, 50)
    gp = build_geo_graph((lat[perm], lon[perm]), 0.5, 50)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(400)
    # gp node k is original node perm[k]
    relabeled = {(min(perm[a], perm[b]), max(perm[a], perm[b])): d for (a, b), d in _as_dict(gp).items()}
    assert relabeled == pytest.approx(_as_dict(g))


def test_antimeridian_and_pole():
    lat = [10.0, 10.0, 89.9999, 89.9999]
    lon = [179.9999, -179.9999, 0.0, 180.0]
    ref = brute_geo_edges(lat, lon, 0.5)
    assert _as_dict(build_geo_graph((lat, lon), 0.5, None)) == pytest.approx(ref)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-80, 80), st.floats(-180, 180)), min_size=1, max_size=40),
       st.floats(0.1, 500))
def test_grid_search_exact_anywhere(points, delta):
    lat = [p[0] for p in points]
    lon = [p[1] for p in points]
    # cluster half the points so that some edges exist
    lat += [lat[0] + 0.001 * k for k in range(1, 6)]
    lon += [lon[0]] * 5
    assert set(_as_dict(build_geo_graph((lat, lon), delta, None))) == set(brute_geo_edges(lat, lon, delta))


def test_grid_cells_are_wide_enough():
    lat, lon = _random_city(50, 0)
    _, _, _, _, n_lon = grid_cells(lat, lon, 0.5)
    width = 2 * math.pi / n_lon
    phi = math.radians(np.abs(lat).max())
    # the east-west extent of one column at the worst latitude must be >= delta
    assert 2 * 6371.0 * math.asin(math.cos(phi) * math.sin(width / 2)) >= 0.5 - 1e-9


def test_pure_python_backend_matches_compiled():
    if backend.NAME != "cython":
        pytest.skip("compiled core not built")
    lat, lon = _random_city(600, 8)
    args = grid_cells(lat, lon, 0.5)
    a = backend.radius_pairs(*args, True, 0.5)
    b = _pycore.radius_pairs(*args, True, 0.5)
    ka = np.lexsort((np.asarray(a[1]), np.asarray(a[0])))
    kb = np.lexsort((np.asarray(b[1]), np.asarray(b[0])))
    for x, y in zip(a, b):
        assert np.allclose(np.asarray(x)[ka], np.asarray(y)[kb], rtol=1e-12)
    flat = np.random.default_rng(0).integers(0, 30, 200)
    offs = np.array([0, 5, 5 + 1, 60, 130, 200])
    for x, y in zip(backend.seq_graph_batch(flat, offs, 30), _pycore.seq_graph_batch(flat, offs, 30)):
        assert np.array_equal(np.asarray(x), np.asarray(y))


def test_backend_env_override(monkeypatch):
    monkeypatch.setenv("KBGNN_PURE_PYTHON", "1")
    mod = importlib.reload(backend)
    try:
        assert mod.NAME == "python"
    finally:
        monkeypatch.delenv("KBGNN_PURE_PYTHON")
        importlib.reload(backend)


def test_geo_graph_file_round_trip(tmp_path):
    lat, lon = _random_city(200, 1)
    g = build_geo_graph((lat, lon), 0.5, 20)
    save_geo_graph(g, tmp_path / "g.tsv")
    h = load_geo_graph(tmp_path / "g.tsv")
    assert (h.num_nodes, h.delta_d, h.max_degree) == (200, 0.5, 20)
    assert np.array_equal(g.src, h.src) and np.array_equal(g.dst, h.dst)
    assert np.array_equal(g.distance, h.distance)
    save_geo_graph(h, tmp_path / "h.tsv")
    assert (tmp_path / "g.tsv").read_bytes() == (tmp_path / "h.tsv").read_bytes()


def test_geo_graph_loader_rejects_other_files(tmp_path):
    (tmp_path / "x.tsv").write_text("0\t1\t0.1\n")
    with pytest.raises(ValueError):
        load_geo_graph(tmp_path / "x.tsv")


# ------------------------------------------------------------ sequential graph


def test_single_visit_graph():
    g = build_seq_graph([7])
    assert g.node_pois == [7] and g.directed_edges == set()


def test_revisit_makes_cycle():
    g = build_seq_graph([0, 1, 2, 0])  # A, B, C, A
    assert g.node_pois == [0, 1, 2]
    assert g.directed_edges == {(0, 1), (1, 2), (2, 0)}


def test_repeated_pair_deduplicated():
    g = build_seq_graph([5, 9, 5, 9])
    assert g.node_pois == [5, 9]
    assert g.directed_edges == {(0, 1), (1, 0)}
    assert g.adjacency.max() == 1


def test_empty_history_rejected():
    with pytest.raises(ValueError):
        build_seq_graph([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=40))
def test_seq_graph_bounds(history):
    g = build_seq_graph(history)
    assert g.num_nodes == len(set(history))
    assert len(g.directed_edges) <= len(history) - 1
    assert np.all(np.diag(g.adjacency) == 0)
    expect = {(g.node_pois.index(a), g.node_pois.index(b))
              for a, b in zip(history, history[1:]) if a != b}
    assert g.directed_edges == expect


def test_batch_matches_single():
    hists = [[1, 2, 3], [4], [5, 6, 5, 7, 8, 6]]
    flat = np.concatenate(hists)
    offs = np.cumsum([0] + [len(h) for h in hists])
    batch = build_seq_graph_batch(flat, offs, 10)
    for b, h in enumerate(hists):
        single = build_seq_graph(h)
        assert batch[b].node_pois == single.node_pois
        assert np.array_equal(batch[b].adjacency, single.adjacency)
    assert np.all(batch.node_pois[1, 1:] == -1)
