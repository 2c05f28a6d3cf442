"""CTR model, joint loss and the training loop."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .consistency import MemoryBank, consistency_loss, infonce_loss, mse_loss
from .data import CheckinSequence, CtrExample, DatasetSplit, ExampleSet
from .geo import AttentionPool, GeoEncoder
from .graphs import GeoGraph, build_seq_graph_batch
from .kernel import SeqKernelEncoder
from .metrics import PROB_EPS, MetricError, auc, logloss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "kbgnn-checkpoint/1"
CONSISTENCY_VARIANTS = ("kl", "infonce", "mse")


@dataclass
class TrainConfig:
    dim: int = 64
    num_layers: int = 2
    heads: int = 4
    num_filters: int = 8
    filter_nodes: int = 4
    max_step: int = 3
    delta_d: float = 0.5
    max_degree: int = 50
    distance_scale: float = 1.0
    beta: float = 0.01
    tau: float = 0.5
    bank_size: int = 2048
    bank_warmup: int = 256
    mlp_hidden: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.0
    batch_size: int = 128
    eval_batch_size: int = 512
    epochs: int = 50
    patience: int = 5
    max_history: int = 100
    negative_ratio: int = 1
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50
    disable_geo: bool = False
    disable_seq: bool = False
    disable_consistency: bool = False
    consistency_variant: str = "kl"
    attention_variant: str = "item"
    uniform_features: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.consistency_variant not in CONSISTENCY_VARIANTS:
            raise ValueError(f"consistency_variant must be one of {CONSISTENCY_VARIANTS}")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    @property
    def consistency_enabled(self):
        return (self.beta > 0 and not self.disable_consistency
                and not self.disable_geo and not self.disable_seq)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml

            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
        return cls.from_dict(d)

    def to_file(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


@dataclass
class Batch:
    hist: torch.Tensor  # (B, T) poi index, 0-padded
    mask: torch.Tensor  # (B, T) bool
    node_pois: torch.Tensor  # (B, n) seq-graph nodes, 0-padded
    n_nodes: torch.Tensor  # (B,)
    adj: torch.Tensor  # (B, n, n)
    target: torch.Tensor  # (B,)
    label: torch.Tensor  # (B,)


def make_batch(examples: ExampleSet, idx, num_pois, dtype=torch.float32) -> Batch:
    flat, offsets = examples.histories(idx)
    lengths = np.diff(offsets)
    if len(idx) and lengths.min() == 0:
        raise ValueError("empty history in batch")
    seq = build_seq_graph_batch(flat, offsets, num_pois)
    t = int(lengths.max()) if len(lengths) else 0
    hist = np.zeros((len(idx), t), dtype=np.int64)
    mask = np.arange(t)[None, :] < lengths[:, None]
    hist[mask] = flat
    return Batch(
        hist=torch.from_numpy(hist),
        mask=torch.from_numpy(mask),
        node_pois=torch.from_numpy(np.maximum(seq.node_pois, 0)),
        n_nodes=torch.from_numpy(seq.n_nodes),
        adj=torch.from_numpy(seq.adjacency).to(dtype),
        target=torch.from_numpy(examples.target[idx]),
        label=torch.from_numpy(examples.label[idx].astype(np.float64)).to(dtype),
    )


def example_batch(example: CtrExample, num_pois, dtype=torch.float32) -> Batch:
    hist = np.asarray(example.history, dtype=np.int64)
    seqs = [CheckinSequence(0, hist, np.zeros(len(hist), np.int64))]
    ex = ExampleSet(seqs, [0], [len(example.history)], [example.target_poi], [example.label],
                    max_history=max(1, len(example.history)))
    return make_batch(ex, np.array([0]), num_pois, dtype)


@dataclass
class Encoded:
    logit: torch.Tensor
    e_g: torch.Tensor
    e_s: torch.Tensor
    h_t: torch.Tensor

    @property
    def prob(self):
        return torch.sigmoid(self.logit)


class KBGNN(nn.Module):
    def __init__(self, num_pois, config: TrainConfig):
        super().__init__()
        c = config
        self.config = c
        self.num_pois = num_pois
        self.geo = GeoEncoder(num_pois, c.dim, 0 if c.disable_geo else c.num_layers,
                              distance_scale=c.distance_scale, dropout=c.dropout)
        self.pool = AttentionPool(c.dim, c.heads, c.attention_variant)
        self.seq = SeqKernelEncoder(c.dim, c.num_filters, c.filter_nodes, c.max_step,
                                    uniform_features=c.uniform_features)
        self.mlp = nn.Sequential(
            nn.Linear(3 * c.dim, c.mlp_hidden),
            nn.LeakyReLU(0.01),
            nn.Linear(c.mlp_hidden, 1),
        )

    @property
    def embedding(self):
        return self.geo.embedding

    def set_graph(self, graph: GeoGraph):
        if self.geo.num_layers:
            self.geo.set_graph(graph)
        return self

    def geo_rows(self, nodes=None):
        return self.geo(nodes)

    def encode(self, batch: Batch, h_all=None) -> Encoded:
        c = self.config
        b = len(batch.target)
        if int(batch.target.max()) >= self.num_pois or int(batch.hist.max()) >= self.num_pois:
            raise IndexError("POI index outside the model's POI table (dataset/model mismatch)")
        if h_all is not None:
            h_hist = h_all[batch.hist]
            h_t = h_all[batch.target]
        else:
            needed = np.unique(np.concatenate([batch.hist[batch.mask].numpy(), batch.target.numpy()]))
            rows = self.geo(needed)
            pos = torch.from_numpy(np.searchsorted(needed, batch.hist.numpy()))
            pos = pos.clamp_max(len(needed) - 1)
            h_hist = rows[pos]
            h_t = rows[torch.from_numpy(np.searchsorted(needed, batch.target.numpy()))]

        zeros = h_t.new_zeros(b, c.dim)
        e_g = zeros if c.disable_geo else self.pool(h_hist, batch.mask)
        if c.disable_seq:
            e_s = zeros
        else:
            feats = self.embedding[batch.node_pois]
            e_s = self.seq(batch.adj.to(feats.dtype), feats, batch.n_nodes)
        logit = self.mlp(torch.cat([e_g, e_s, h_t], dim=-1))[:, 0]
        return Encoded(logit, e_g, e_s, h_t)

    def forward(self, batch: Batch, h_all=None):
        return self.encode(batch, h_all).prob


def rec_loss(predictions, labels):
    """Mean binary cross-entropy on clamped probabilities."""
    p = predictions.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()


def joint_loss(model: KBGNN, batch: Batch, bank: MemoryBank | None):
    """Return ``(total, rec, con, con_active, encoded)``."""
    c = model.config
    enc = model.encode(batch)
    rec = rec_loss(enc.prob, batch.label)
    con = rec.new_zeros(())
    active = False
    if c.consistency_enabled:
        if c.consistency_variant == "kl":
            con, active = consistency_loss(enc.e_g, enc.e_s, bank, c.tau, c.bank_warmup)
        elif c.consistency_variant == "infonce":
            con, active = infonce_loss(enc.e_g, enc.e_s, c.tau), True
        else:
            con, active = mse_loss(enc.e_g, enc.e_s), True
    total = rec + c.beta * con if active else rec
    return total, rec, con, active, enc


def predict_ctr(model: KBGNN, example: CtrExample, geo_graph: GeoGraph | None = None) -> float:
    """Probability that ``example.target_poi`` is the next check-in."""
    if geo_graph is not None:
        model.set_graph(geo_graph)
    if not example.history:
        raise ValueError("history must be non-empty")
    if not 0 <= example.target_poi < model.num_pois or max(example.history) >= model.num_pois:
        raise IndexError("POI index outside the model's POI table (dataset/model mismatch)")
    model.eval()
    with torch.no_grad():
        batch = example_batch(example, model.num_pois, model.embedding.dtype)
        return float(model(batch)[0])


@torch.no_grad()
def score(model: KBGNN, examples: ExampleSet, batch_size=512) -> np.ndarray:
    """Probabilities for every example, in order."""
    model.eval()
    h_all = model.geo(None)
    out = []
    for start in range(0, len(examples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(examples)))
        batch = make_batch(examples, idx, model.num_pois, model.embedding.dtype)
        out.append(model(batch, h_all).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def quick_metrics(model, examples, batch_size=512):
    probs = score(model, examples, batch_size)
    try:
        a = auc(probs, examples.label)
    except MetricError:
        a = float("nan")
    return a, logloss(probs, examples.label)


# ------------------------------------------------------------ checkpointing


def save_checkpoint(path, model: KBGNN, optimizer=None, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "config_hash": model.config.hash(),
        "num_pois": model.num_pois,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, geo_graph: GeoGraph | None = None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    config = TrainConfig.from_dict(payload["config"])
    model = KBGNN(payload["num_pois"], config).to(config.torch_dtype)
    model.load_state_dict(payload["state_dict"])
    if geo_graph is not None:
        model.set_graph(geo_graph)
    return model, payload


# ------------------------------------------------------------ training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: KBGNN
    optimizer: torch.optim.Optimizer
    metrics: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    steps: int = 0


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_model(config: TrainConfig, num_pois, geo_graph: GeoGraph) -> KBGNN:
    seed_everything(config.seed)
    model = KBGNN(num_pois, config).to(config.torch_dtype)
    return model.set_graph(geo_graph)


def _dump_bad_batch(out_dir, epoch, step, idx, rec, con):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_e{epoch}_s{step}.json"
    path.write_text(json.dumps({"epoch": epoch, "step": step, "example_indices": idx.tolist(),
                                "rec_loss": repr(float(rec.detach())), "con_loss": repr(float(con.detach()))}))
    return path


def train(config: TrainConfig, split: DatasetSplit, geo_graph: GeoGraph, out_dir=None,
          train_examples: ExampleSet | None = None, eval_examples: ExampleSet | None = None) -> TrainResult:
    """Joint training with per-epoch validation and AUC early stopping.

    Writes ``metrics.jsonl`` (deterministic), ``timing.jsonl`` (wall clock),
    ``best.pt`` and ``config.json`` under ``out_dir`` when given.
    """
    c = config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        c.to_file(out / "config.json")
    train_ex = train_examples if train_examples is not None else split.train
    val_ex = eval_examples if eval_examples is not None else split.val
    num_pois = split.num_pois

    model = build_model(c, num_pois, geo_graph)
    optimizer = torch.optim.Adam(model.parameters(), lr=c.lr, weight_decay=c.weight_decay)
    bank = MemoryBank(c.bank_size, c.dim, c.torch_dtype)
    rng = np.random.default_rng(c.seed)

    metrics = []
    metrics_fh = open(out / "metrics.jsonl", "w") if out else None
    timing_fh = open(out / "timing.jsonl", "w") if out else None
    t0 = time.perf_counter()

    def log(rec):
        metrics.append(rec)
        if metrics_fh:
            metrics_fh.write(json.dumps(rec) + "\n")
            metrics_fh.flush()
        if timing_fh:
            timing_fh.write(json.dumps({"kind": rec["kind"], "epoch": rec["epoch"], "step": rec["step"],
                                        "elapsed_s": round(time.perf_counter() - t0, 3)}) + "\n")
            timing_fh.flush()

    best_state, best_auc, best_epoch, bad_epochs, step = None, -math.inf, -1, 0, 0
    try:
        for epoch in range(c.epochs):
            model.train()
            order = rng.permutation(len(train_ex))
            for start in range(0, len(order), c.batch_size):
                idx = order[start:start + c.batch_size]
                batch = make_batch(train_ex, idx, num_pois, c.torch_dtype)
                total, rec, con, active, enc = joint_loss(model, batch, bank)
                if not torch.isfinite(total):
                    dump = _dump_bad_batch(out, epoch, step, idx, rec, con)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; batch dump: {dump}")
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                if c.consistency_enabled and c.consistency_variant == "kl":
                    pos = batch.label > 0.5
                    bank.push(enc.e_g[pos], enc.e_s[pos])
                if step % c.log_every == 0:
                    log({"kind": "step", "epoch": epoch, "step": step, "loss": float(total.detach()),
                         "rec_loss": float(rec.detach()), "con_loss": float(con.detach()), "con_active": active})
                step += 1

            val_auc, val_ll = quick_metrics(model, val_ex, c.eval_batch_size)
            improved = val_auc > best_auc
            log({"kind": "epoch", "epoch": epoch, "step": step, "val_auc": val_auc,
                 "val_logloss": val_ll, "best": improved})
            logger.info("epoch %d: val auc %.4f logloss %.4f", epoch, val_auc, val_ll)
            if improved:
                best_auc, best_epoch, bad_epochs = val_auc, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
                if out is not None:
                    save_checkpoint(out / "best.pt", model, optimizer,
                                    {"epoch": epoch, "step": step, "val_auc": val_auc, "seed": c.seed})
            else:
                bad_epochs += 1
                if bad_epochs >= c.patience:
                    break
    finally:
        if metrics_fh:
            metrics_fh.close()
        if timing_fh:
            timing_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, optimizer, metrics, best_epoch, best_auc, step)
