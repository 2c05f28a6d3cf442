"""Small shared fixtures for tests that need a dataset, graph or model."""

import numpy as np

from kbgnn.data import make_split, sample_negatives
from kbgnn.graphs import build_geo_graph
from kbgnn.model import TrainConfig, build_model, make_batch
from kbgnn.synthetic import synthetic_checkins


def tiny_split(n_users=16, n_pois=120, mean_length=14, seed=0, max_history=100):
    pois, seqs = synthetic_checkins(n_users=n_users, n_pois=n_pois, mean_length=mean_length,
                                    n_hoods=4, seed=seed)
    split = sample_negatives(make_split(seqs, seed, max_history, pois=pois), 1, seed)
    return split, build_geo_graph(split.pois, 0.5, 50)


def tiny_config(**kw):
    base = dict(dim=8, heads=4, num_filters=3, filter_nodes=3, max_step=3, mlp_hidden=8,
                bank_size=32, bank_warmup=4, batch_size=16, epochs=2, patience=2, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def tiny_model(split, graph, **kw):
    return build_model(tiny_config(**kw), split.num_pois, graph)


def first_batch(model, examples, n=8):
    return make_batch(examples, np.arange(min(n, len(examples))), model.num_pois, model.embedding.dtype)


ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    """Print and keep one PASS/FAIL line for the end-of-run summary."""
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"[{status}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def acceptance_sort_key(line):
    tag = line.split("criterion ", 1)[1].split(":", 1)[0]
    num = "".join(ch for ch in tag if ch.isdigit())
    return (int(num) if num else 99, tag)
