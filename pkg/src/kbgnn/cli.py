"""Command-line entry point: ``kbgnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import backend
from .data import (load_dataset, make_split, read_foursquare, sample_negatives,
                   save_dataset, subsample_users)
from .graphs import build_geo_graph, load_geo_graph, save_geo_graph

logger = logging.getLogger("kbgnn")

GEO_GRAPH_FILE = "geo_graph.tsv"


def _geo_graph_for(data_dir, split, delta_d, max_degree):
    """Load the cached edge list when its header matches, else rebuild it."""
    path = Path(data_dir) / GEO_GRAPH_FILE
    if path.exists():
        g = load_geo_graph(path)
        if (g.num_nodes == split.num_pois and math.isclose(g.delta_d, delta_d)
                and g.max_degree == max_degree):
            return g
        logger.info("cached geo graph does not match config; rebuilding")
    g = build_geo_graph(split.pois, delta_d, max_degree)
    save_geo_graph(g, path)
    return g


def cmd_synth(args):
    from .synthetic import write_synthetic_tsv

    write_synthetic_tsv(args.out, n_users=args.users, n_pois=args.pois,
                        mean_length=args.mean_length, seed=args.seed)
    print(f"wrote {args.out}")


def cmd_prepare(args):
    result = read_foursquare(args.input)
    pois, seqs = result.pois, result.sequences
    print(f"parsed {len(seqs)} users, {len(pois)} POIs, {result.n_raw_checkins} check-ins "
          f"({result.n_collapsed_checkins} after collapsing repeats, {result.n_malformed} malformed lines)")
    if args.users:
        pois, seqs = subsample_users(pois, seqs, args.users, args.subsample_seed)
        print(f"subsampled {len(seqs)} users, {len(pois)} POIs")
    split = make_split(seqs, args.seed, args.max_history, pois=pois)
    split.stats["raw_interactions"] = result.n_raw_checkins
    split.stats["source"] = str(args.input)
    split = sample_negatives(split, args.neg_ratio, args.seed)
    out = save_dataset(split, args.out)
    g = build_geo_graph(split.pois, args.delta_d, args.max_degree)
    save_geo_graph(g, out / GEO_GRAPH_FILE)
    print(json.dumps({"stats": split.stats, "train": len(split.train), "val": len(split.val),
                      "test": len(split.test), "geo_edges": g.num_edges}, indent=2))


def cmd_build_graph(args):
    split = load_dataset(args.data)
    g = build_geo_graph(split.pois, args.delta_d, args.max_degree)
    save_geo_graph(g, Path(args.data) / GEO_GRAPH_FILE)
    print(f"{g.num_nodes} nodes, {g.num_edges} edges, mean degree {g.degree.mean():.2f} "
          f"({backend.NAME} kernels)")


def _config(path):
    from .model import TrainConfig

    return TrainConfig.from_file(path) if path else TrainConfig()


def cmd_train(args):
    from .evaluate import evaluate
    from .model import train

    config = _config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    split = load_dataset(args.data)
    g = _geo_graph_for(args.data, split, config.delta_d, config.max_degree)
    res = train(config, split, g, args.out)
    rep = evaluate(res.model, split.test, split_name="test")
    summary = {"best_epoch": res.best_epoch, "best_val_auc": res.best_val_auc, "steps": res.steps,
               "test_auc": rep.auc, "test_logloss": rep.logloss, "config_hash": config.hash()}
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0 if rep.ok else 2


def cmd_eval(args):
    from .evaluate import evaluate, write_table
    from .model import load_checkpoint, score

    split = load_dataset(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    g = _geo_graph_for(args.data, split, model.config.delta_d, model.config.max_degree)
    model.set_graph(g)
    examples = getattr(split, args.split)
    rep = evaluate(model, examples, split_name=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / f"eval_{args.split}.tsv", [rep])
    probs = score(model, examples)
    np.savetxt(out / f"scores_{args.split}.tsv", np.c_[probs, examples.label], fmt=["%.17g", "%d"],
               delimiter="\t", header="prob\tlabel", comments="")
    _plot_roc(probs, examples.label, out / f"roc_{args.split}.png")
    print(f"{args.split}: auc={rep.auc:.4f} logloss={rep.logloss:.4f} n={rep.n_examples}")
    if not rep.ok:
        print(f"error: {rep.error}", file=sys.stderr)
        return 2
    return 0


def _plot_roc(probs, labels, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = np.argsort(-probs, kind="stable")
    y = np.asarray(labels)[order]
    tpr = np.r_[0, np.cumsum(y) / max(y.sum(), 1)]
    fpr = np.r_[0, np.cumsum(1 - y) / max((1 - y).sum(), 1)]
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.plot(fpr, tpr)
    ax.plot([0, 1], [0, 1], "--", c="0.6")
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_cold_start(args):
    from .evaluate import cold_start_run

    config = _config(args.config)
    split = load_dataset(args.data)
    g = _geo_graph_for(args.data, split, config.delta_d, config.max_degree)
    rows = cold_start_run(config, split, g, tuple(args.fractions), args.out)
    for r in rows:
        print(f"{r['fraction']:.1f}\tauc={r['auc']:.4f}\tlogloss={r['logloss']:.4f}")
    return 2 if any(r["error"] for r in rows) else 0


def cmd_ablate(args):
    from .evaluate import ablation_run

    config = _config(args.config)
    split = load_dataset(args.data)
    g = _geo_graph_for(args.data, split, config.delta_d, config.max_degree)
    rows = ablation_run(config, split, g, tuple(args.seeds), args.variants, args.out)
    for r in rows:
        print(f"{r['variant']}\tseed={r['seed']}\ttest_auc={r['test_auc']:.4f}")
    return 2 if any(math.isnan(r["test_auc"]) for r in rows) else 0


def cmd_plot_case(args):
    from .evaluate import emit_case_study
    from .model import load_checkpoint

    split = load_dataset(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    model.set_graph(_geo_graph_for(args.data, split, model.config.delta_d, model.config.max_degree))
    res = emit_case_study(model, split, args.user, args.k, args.bounds, args.out)
    print(f"wrote {res['plot']}")


def cmd_plot_filters(args):
    from .evaluate import plot_filters
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    files = plot_filters(model, args.out, args.threshold)
    print(f"wrote {len(files)} filter plots to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="kbgnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic Foursquare-format TSV")
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=200)
    s.add_argument("--pois", type=int, default=3000)
    s.add_argument("--mean-length", type=int, default=120)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="parse, split, sample negatives, build the geo graph")
    s.add_argument("--input", required=True, help="Foursquare TSV (TSMC2014 layout)")
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=0, help="subsample this many users (0 = all)")
    s.add_argument("--subsample-seed", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--neg-ratio", type=int, default=1)
    s.add_argument("--max-history", type=int, default=100)
    s.add_argument("--delta-d", type=float, default=0.5)
    s.add_argument("--max-degree", type=int, default=50)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("build-graph", help="(re)build the geographical graph of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--delta-d", type=float, default=0.5)
    s.add_argument("--max-degree", type=int, default=50)
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("train")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("val", "test"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cold-start")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fractions", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 1.0])
    s.set_defaults(func=cmd_cold_start)

    s = sub.add_parser("ablate")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--variants", nargs="+")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot-case")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--user", type=int, required=True)
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--bounds", type=float, nargs=4, metavar=("LAT_MIN", "LAT_MAX", "LON_MIN", "LON_MAX"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot_case)

    s = sub.add_parser("plot-filters")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_plot_filters)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
