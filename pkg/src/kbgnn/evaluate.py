"""Evaluation reports, cold-start folds, ablation grid and case-study plots."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import CheckinSequence, DatasetSplit, ExampleSet
from .graphs import GeoGraph
from .metrics import MetricError, auc, logloss
from .model import KBGNN, TrainConfig, make_batch, score, train

logger = logging.getLogger(__name__)

COLD_START_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
N_FOLDS = 5


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n_examples: int
    config_hash: str = ""
    split: str = ""
    error: str = ""

    @property
    def ok(self):
        return not self.error


def evaluate(model: KBGNN, examples: ExampleSet, geo_graph: GeoGraph | None = None,
             split_name="", batch_size=512) -> EvalReport:
    if geo_graph is not None:
        model.set_graph(geo_graph)
    probs = score(model, examples, batch_size)
    err = ""
    try:
        a = auc(probs, examples.label)
    except MetricError as exc:
        a, err = float("nan"), str(exc)
    return EvalReport(a, logloss(probs, examples.label), len(examples),
                      model.config.hash(), split_name, err)


def write_table(path, rows, columns=None):
    """Tab-separated table with a header row."""
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, delimiter="\t", extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


# ------------------------------------------------------------ cold start


def cold_start_folds(examples: ExampleSet, seed=0, n_folds=N_FOLDS) -> np.ndarray:
    """Fold id per example. Each positive and its negatives share a fold, and
    each user's positives are spread evenly across folds."""
    group = np.cumsum(examples.label == 1) - 1
    n_groups = int(group[-1]) + 1 if len(group) else 0
    pos_rows = np.flatnonzero(examples.label == 1)
    group_user = examples.user[pos_rows]
    rng = np.random.default_rng(seed)
    fold_of_group = np.empty(n_groups, dtype=np.int64)
    for u in np.unique(group_user):
        g = np.flatnonzero(group_user == u)
        g = g[rng.permutation(len(g))]
        fold_of_group[g] = (np.arange(len(g)) + rng.integers(n_folds)) % n_folds
    return fold_of_group[group]


def cold_start_run(config: TrainConfig, split: DatasetSplit, geo_graph: GeoGraph,
                   fractions=COLD_START_FRACTIONS, out_dir=None):
    folds = cold_start_folds(split.train, config.seed)
    rows = []
    for frac in fractions:
        k = round(frac * N_FOLDS)
        if not math.isclose(k / N_FOLDS, frac):
            raise ValueError(f"fraction {frac} is not a multiple of 1/{N_FOLDS}")
        sub = split.train.subset(np.flatnonzero(folds < k))
        run_dir = Path(out_dir) / f"frac_{frac:.1f}" if out_dir else None
        res = train(config, split, geo_graph, run_dir, train_examples=sub)
        rep = evaluate(res.model, split.test, split_name="test")
        rows.append({"fraction": frac, "n_train": len(sub), "auc": rep.auc,
                     "logloss": rep.logloss, "error": rep.error})
        logger.info("cold-start %.1f: auc %.4f", frac, rep.auc)
    if out_dir:
        write_table(Path(out_dir) / "cold_start.tsv", rows)
        _plot_cold_start(rows, Path(out_dir) / "cold_start.png")
    return rows


def _plot_cold_start(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    x = [r["fraction"] * 100 for r in rows]
    for ax, key in zip(axes, ("auc", "logloss")):
        ax.plot(x, [r[key] for r in rows], marker="o")
        ax.set_xlabel("% of training data")
        ax.set_ylabel(key.upper() if key == "auc" else "Logloss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ------------------------------------------------------------ ablations

ABLATIONS = {
    "full": {},
    "wo_geo": {"disable_geo": True},
    "wo_seq": {"disable_seq": True},
    "con_none": {"beta": 0.0},
    "con_kl": {"consistency_variant": "kl"},
    "con_infonce": {"consistency_variant": "infonce"},
    "con_mse": {"consistency_variant": "mse"},
}


def ablation_run(config: TrainConfig, split: DatasetSplit, geo_graph: GeoGraph, seeds=(0,),
                 variants=None, out_dir=None):
    rows = []
    for seed in seeds:
        for name in variants or ABLATIONS:
            cfg = config.replace(seed=seed, **ABLATIONS[name])
            run_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir else None
            res = train(cfg, split, geo_graph, run_dir)
            rep = evaluate(res.model, split.test, split_name="test")
            rows.append({"variant": name, "seed": seed, "val_auc": res.best_val_auc,
                         "test_auc": rep.auc, "test_logloss": rep.logloss,
                         "best_epoch": res.best_epoch, "config_hash": cfg.hash()})
            logger.info("ablation %s seed %d: test auc %.4f", name, seed, rep.auc)
    if out_dir:
        write_table(Path(out_dir) / "ablation.tsv", rows)
        _plot_ablation(rows, Path(out_dir) / "ablation.png")
    return rows


def _plot_ablation(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(dict.fromkeys(r["variant"] for r in rows))
    means = [np.mean([r["test_auc"] for r in rows if r["variant"] == n]) for n in names]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    ax.bar(names, means)
    lo = min(means) - 0.02
    ax.set_ylim(max(0.0, lo), min(1.0, max(means) + 0.01))
    ax.set_ylabel("test AUC")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ------------------------------------------------------------ case study


@torch.no_grad()
def view_scores(model: KBGNN, history, candidates):
    """Logits for ``candidates`` given one history, under three views:
    full, geo-only (e_s zeroed) and seq-only (e_g zeroed)."""
    model.eval()
    h_all = model.geo(None)
    hist = np.asarray(history, dtype=np.int64)
    seqs = [CheckinSequence(0, hist, np.zeros(len(hist), np.int64))]
    ex = ExampleSet(seqs, [0], [len(hist)], [int(candidates[0])], [1], max_history=len(hist))
    batch = make_batch(ex, np.array([0]), model.num_pois, model.embedding.dtype)
    enc = model.encode(batch, h_all)
    cand = torch.as_tensor(np.asarray(candidates, dtype=np.int64))
    h_t = h_all[cand]
    n = len(cand)
    e_g = enc.e_g.expand(n, -1)
    e_s = enc.e_s.expand(n, -1)
    zero = torch.zeros_like(e_g)
    out = {}
    for name, (g, s) in {"full": (e_g, e_s), "geo": (e_g, zero), "seq": (zero, e_s)}.items():
        out[name] = model.mlp(torch.cat([g, s, h_t], dim=-1))[:, 0].double().numpy()
    return out


def emit_case_study(model: KBGNN, split: DatasetSplit, user_index, k=50, map_bounds=None, out_dir="."):
    """Map of one user's trajectory with the top-k POIs of the geo-only and
    seq-only views. ``map_bounds`` = (lat_min, lat_max, lon_min, lon_max)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq = split.sequences[user_index]
    history = seq.pois[:-1][-split.train.max_history:]
    if len(history) == 0:
        raise ValueError(f"user {user_index} has an empty history")
    lat = np.array([p.lat for p in split.pois])
    lon = np.array([p.lon for p in split.pois])
    if map_bounds is None:
        cand = np.arange(len(split.pois))
    else:
        la0, la1, lo0, lo1 = map_bounds
        cand = np.flatnonzero((lat >= la0) & (lat <= la1) & (lon >= lo0) & (lon <= lo1))
    top = {"geo": np.zeros(0, np.int64), "seq": np.zeros(0, np.int64)}
    if k > 0 and len(cand):
        scores = view_scores(model, history, cand)
        for view in top:
            order = np.lexsort((cand, -scores[view]))
            top[view] = cand[order[:k]]

    fig, axes = plt.subplots(1, 2, figsize=(10, 5), sharex=True, sharey=True)
    for ax, view, color in zip(axes, ("geo", "seq"), ("tab:red", "tab:blue")):
        ax.scatter(lon[cand], lat[cand], s=1, c="0.85")
        ax.plot(lon[history], lat[history], "-", c="0.3", lw=0.6)
        ax.scatter(lon[history], lat[history], s=8, c="k", label="trajectory")
        if len(top[view]):
            ax.scatter(lon[top[view]], lat[top[view]], s=14, c=color, label=f"top-{k} ({view})")
        ax.set_title(f"{view} module")
        ax.set_xlabel("longitude")
        ax.legend(loc="lower right", fontsize=7)
    axes[0].set_ylabel("latitude")
    fig.tight_layout()
    png = out / f"case_user{user_index}.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    write_table(out / f"case_user{user_index}.tsv",
                [{"view": v, "rank": r, "poi_index": int(p), "poi_id": split.pois[p].poi_id}
                 for v in top for r, p in enumerate(top[v])],
                ["view", "rank", "poi_index", "poi_id"])
    return {"plot": png, "top": top}


def filter_structures(model: KBGNN, threshold=0.5):
    """Squashed adjacency and thresholded edge list per graph filter."""
    with torch.no_grad():
        adj = model.seq.filters.adjacency().double().numpy()
    out = []
    for a in adj:
        i, j = np.nonzero(np.triu(a > threshold, k=1))
        out.append({"adjacency": a, "edges": list(zip(i.tolist(), j.tolist()))})
    return out


def plot_filters(model: KBGNN, out_dir, threshold=0.5):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    dump = []
    for f, st in enumerate(filter_structures(model, threshold)):
        a, edges = st["adjacency"], st["edges"]
        n = len(a)
        ang = 2 * np.pi * np.arange(n) / n
        xy = np.stack([np.cos(ang), np.sin(ang)], 1)
        fig, ax = plt.subplots(figsize=(2.5, 2.5))
        for i, j in edges:
            ax.plot(*xy[[i, j]].T, c="tab:blue", lw=1 + 3 * (a[i, j] - threshold) / (1 - threshold))
        ax.scatter(*xy.T, s=120, c="tab:orange", zorder=3)
        ax.set_title(f"filter {f}")
        ax.set_axis_off()
        ax.set_aspect("equal")
        path = out / f"filter_{f}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        files.append(path)
        dump.append({"filter": f, "adjacency": a.tolist(), "edges": edges})
    write_table(out / "filters.tsv",
                [{"filter": d["filter"], "i": i, "j": j, "weight": float(np.asarray(d["adjacency"])[i, j])}
                 for d in dump for i, j in d["edges"]], ["filter", "i", "j", "weight"])
    (out / "filters.json").write_text(json.dumps({"threshold": threshold, "filters": dump}, indent=1))
    return files
