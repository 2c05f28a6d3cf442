"""Foursquare check-in parsing, leave-last-out splits and negative sampling.

Examples are stored columnar: an example is a (user, end, target, label)
row whose history is ``sequence[user][max(0, end - max_history):end]``. That
keeps a 200k-example split at a few megabytes instead of millions of Python
ints, and makes the temporal no-leak property a direct index comparison.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DATASET_FORMAT = "kbgnn-dataset/1"
MAX_MALFORMED_FRACTION = 0.01
DEFAULT_MAX_HISTORY = 100
MIN_SEQUENCE_LENGTH = 3


class FormatError(ValueError):
    """Input does not look like a Foursquare check-in dump."""


@dataclass(frozen=True)
class PoiRecord:
    poi_id: str
    poi_index: int
    lon: float
    lat: float


@dataclass
class CheckinSequence:
    user_index: int
    pois: np.ndarray  # int64 poi_index per visit
    timestamps: np.ndarray  # int64 UTC seconds, non-decreasing
    user_id: str = ""

    def __len__(self):
        return len(self.pois)

    @property
    def visits(self):
        return list(zip(self.pois.tolist(), self.timestamps.tolist()))


@dataclass(frozen=True)
class CtrExample:
    user_index: int
    history: list
    target_poi: int
    label: int


@dataclass
class ParseResult:
    pois: list
    sequences: list
    n_lines: int = 0
    n_malformed: int = 0
    n_raw_checkins: int = 0

    @property
    def n_collapsed_checkins(self):
        return sum(len(s) for s in self.sequences)


class ExampleSet:
    """Columnar collection of CTR examples over a shared sequence table."""

    def __init__(self, sequences, user, end, target, label, max_history=DEFAULT_MAX_HISTORY):
        self.sequences = sequences
        self.user = np.asarray(user, dtype=np.int64)
        self.end = np.asarray(end, dtype=np.int64)
        self.target = np.asarray(target, dtype=np.int64)
        self.label = np.asarray(label, dtype=np.int8)
        self.max_history = int(max_history)

    def __len__(self):
        return len(self.user)

    def __getitem__(self, i) -> CtrExample:
        return CtrExample(
            user_index=int(self.user[i]),
            history=self.history(i).tolist(),
            target_poi=int(self.target[i]),
            label=int(self.label[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def history(self, i) -> np.ndarray:
        end = int(self.end[i])
        return self.sequences[int(self.user[i])].pois[max(0, end - self.max_history):end]

    def histories(self, idx):
        """Ragged histories for rows ``idx`` as ``(flat, offsets)``."""
        parts = [self.history(i) for i in idx]
        offsets = np.zeros(len(parts) + 1, dtype=np.int64)
        np.cumsum([len(p) for p in parts], out=offsets[1:])
        flat = np.concatenate(parts) if parts else np.zeros(0, np.int64)
        return flat.astype(np.int64), offsets

    def subset(self, idx) -> "ExampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ExampleSet(self.sequences, self.user[idx], self.end[idx], self.target[idx],
                          self.label[idx], self.max_history)

    @property
    def n_positive(self):
        return int(self.label.sum())


@dataclass
class DatasetSplit:
    pois: list
    sequences: list
    train: ExampleSet
    val: ExampleSet
    test: ExampleSet
    stats: dict = field(default_factory=dict)

    @property
    def num_pois(self):
        return len(self.pois)

    @property
    def num_users(self):
        return len(self.sequences)

    @property
    def train_examples(self):
        return self.train

    @property
    def val_examples(self):
        return self.val

    @property
    def test_examples(self):
        return self.test


def _parse_time(text):
    return int(datetime.strptime(text.strip(), "%a %b %d %H:%M:%S %z %Y").timestamp())


def read_foursquare(path) -> ParseResult:
    """Parse a TSMC2014-format dump (8 tab-separated columns)."""
    path = Path(path)
    fh = open(path, encoding="utf-8", errors="replace")
    poi_lookup = {}
    pois = []
    user_lookup = {}
    rows = []  # (user_index, utc_seconds, line_no, poi_index)
    n_lines = n_bad = 0
    with fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            n_lines += 1
            cols = line.rstrip("\r\n").split("\t")
            try:
                if len(cols) != 8:
                    raise ValueError("column count")
                user_id, venue_id = cols[0], cols[1]
                lat, lon = float(cols[4]), float(cols[5])
                if not (math.isfinite(lat) and math.isfinite(lon)
                        and -90 <= lat <= 90 and -180 <= lon <= 180):
                    raise ValueError("coordinates")
                ts = _parse_time(cols[7])
            except ValueError:
                n_bad += 1
                continue
            poi = poi_lookup.get(venue_id)
            if poi is None:
                poi = poi_lookup[venue_id] = len(pois)
                pois.append(PoiRecord(venue_id, poi, lon, lat))
            user = user_lookup.setdefault(user_id, len(user_lookup))
            rows.append((user, ts, line_no, poi))

    if n_lines and n_bad / n_lines > MAX_MALFORMED_FRACTION:
        raise FormatError(
            f"{path}: {n_bad}/{n_lines} malformed lines; expected the Foursquare TSV layout")
    if n_bad:
        logger.warning("%s: skipped %d malformed lines", path, n_bad)

    rows.sort()
    user_ids = list(user_lookup)
    sequences = []
    start = 0
    while start < len(rows):
        user = rows[start][0]
        stop = start
        while stop < len(rows) and rows[stop][0] == user:
            stop += 1
        seq_pois, seq_ts = [], []
        for _, ts, _, poi in rows[start:stop]:
            if seq_pois and seq_pois[-1] == poi:
                continue
            seq_pois.append(poi)
            seq_ts.append(ts)
        sequences.append(CheckinSequence(user, np.asarray(seq_pois, np.int64),
                                         np.asarray(seq_ts, np.int64), user_ids[user]))
        start = stop
    return ParseResult(pois, sequences, n_lines, n_bad, len(rows))


def parse_foursquare(path):
    """Return ``(pois, sequences)`` from a Foursquare check-in file."""
    result = read_foursquare(path)
    return result.pois, result.sequences


def write_foursquare(path, pois, sequences):
    """Serialize sequences back to the 8-column TSV layout (category fields blank)."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            for poi, ts in zip(seq.pois.tolist(), seq.timestamps.tolist()):
                rec = pois[poi]
                when = datetime.fromtimestamp(ts, timezone.utc).strftime("%a %b %d %H:%M:%S +0000 %Y")
                fh.write(f"{seq.user_id or seq.user_index}\t{rec.poi_id}\t-\t-\t"
                         f"{rec.lat!r}\t{rec.lon!r}\t0\t{when}\n")


def subsample_users(pois, sequences, n_users, seed):
    """Keep ``n_users`` random users and re-index the POIs they visited."""
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(sequences), size=min(n_users, len(sequences)), replace=False))
    chosen = [sequences[i] for i in keep]
    used = np.unique(np.concatenate([s.pois for s in chosen])) if chosen else np.zeros(0, np.int64)
    remap = np.full(len(pois), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    new_pois = [PoiRecord(pois[p].poi_id, k, pois[p].lon, pois[p].lat)
                for k, p in enumerate(used.tolist())]
    new_seqs = [CheckinSequence(u, remap[s.pois], s.timestamps.copy(), s.user_id)
                for u, s in enumerate(chosen)]
    return new_pois, new_seqs


def make_split(sequences, seed, max_history=DEFAULT_MAX_HISTORY, pois=None) -> DatasetSplit:
    """Leave-last-out split; evaluation targets shuffled 50/50 into val/test."""
    kept = []
    dropped = 0
    for seq in sequences:
        if len(seq) < MIN_SEQUENCE_LENGTH:
            dropped += 1
            continue
        kept.append(seq)
    if dropped:
        logger.info("dropped %d users with fewer than %d visits", dropped, MIN_SEQUENCE_LENGTH)
    seqs = [CheckinSequence(u, s.pois, s.timestamps, s.user_id) for u, s in enumerate(kept)]

    tr_user, tr_end = [], []
    for u, seq in enumerate(seqs):
        n = len(seq)
        tr_user.append(np.full(n - 2, u, dtype=np.int64))
        tr_end.append(np.arange(1, n - 1, dtype=np.int64))
    tr_user = np.concatenate(tr_user) if tr_user else np.zeros(0, np.int64)
    tr_end = np.concatenate(tr_end) if tr_end else np.zeros(0, np.int64)
    tr_target = np.array([seqs[u].pois[e] for u, e in zip(tr_user, tr_end)], dtype=np.int64)

    ev_user = np.arange(len(seqs), dtype=np.int64)
    ev_end = np.array([len(s) - 1 for s in seqs], dtype=np.int64)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(seqs))
    n_val = len(seqs) // 2
    val_idx, test_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    def _eval(idx):
        users = ev_user[idx]
        ends = ev_end[idx]
        targets = np.array([seqs[u].pois[e] for u, e in zip(users, ends)], dtype=np.int64)
        return ExampleSet(seqs, users, ends, targets, np.ones(len(idx), np.int8), max_history)

    pois = list(pois) if pois is not None else []
    n_checkins = int(sum(len(s) for s in seqs))
    stats = {
        "users": len(seqs),
        "pois": len(pois),
        "interactions": n_checkins,
        "avg_seq_len": n_checkins / len(seqs) if seqs else 0.0,
        "dropped_users": dropped,
        "max_history": int(max_history),
        "split_seed": int(seed),
    }
    return DatasetSplit(
        pois=pois,
        sequences=seqs,
        train=ExampleSet(seqs, tr_user, tr_end, tr_target, np.ones(len(tr_user), np.int8), max_history),
        val=_eval(val_idx),
        test=_eval(test_idx),
        stats=stats,
    )


def _negatives_for(examples: ExampleSet, num_pois, ratio, rng) -> ExampleSet:
    pos = np.flatnonzero(examples.label == 1)
    n = len(pos)
    users = np.repeat(examples.user[pos], ratio)
    targets = rng.integers(0, num_pois, size=n * ratio)
    visited = {}
    for k in range(len(targets)):
        u = int(users[k])
        seen = visited.get(u)
        if seen is None:
            seen = visited[u] = set(examples.sequences[u].pois.tolist())
        while int(targets[k]) in seen:
            targets[k] = rng.integers(0, num_pois)
    # each positive followed by its negatives
    block = ratio + 1
    user = np.empty(n * block, np.int64)
    end = np.empty(n * block, np.int64)
    target = np.empty(n * block, np.int64)
    label = np.zeros(n * block, np.int8)
    user[0::block] = examples.user[pos]
    end[0::block] = examples.end[pos]
    target[0::block] = examples.target[pos]
    label[0::block] = 1
    for r in range(ratio):
        sl = slice(r + 1, None, block)
        user[sl] = examples.user[pos]
        end[sl] = examples.end[pos]
        target[sl] = targets[r::ratio]
    return ExampleSet(examples.sequences, user, end, target, label, examples.max_history)


def sample_negatives(split: DatasetSplit, ratio=1, seed=0) -> DatasetSplit:
    """Attach ``ratio`` uniformly drawn unvisited-POI negatives to each positive."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(3)
    num_pois = split.num_pois or 1 + max(int(s.pois.max()) for s in split.sequences)
    parts = [
        _negatives_for(ex, num_pois, ratio, np.random.default_rng(st))
        for ex, st in zip((split.train, split.val, split.test), streams)
    ]
    stats = dict(split.stats, negative_ratio=int(ratio), negative_seed=int(seed))
    return DatasetSplit(split.pois, split.sequences, *parts, stats=stats)


def check_no_leak(split: DatasetSplit) -> bool:
    """Every training example ends strictly before its user's evaluation target."""
    last = np.array([len(s) - 1 for s in split.sequences], dtype=np.int64)
    tr = split.train
    return not np.any(tr.end >= last[tr.user])


# ---------------------------------------------------------------- persistence


def _save_examples(path, ex: ExampleSet):
    np.savez(path, user=ex.user, end=ex.end, target=ex.target, label=ex.label)


def _load_examples(path, sequences, max_history):
    with np.load(path) as z:
        return ExampleSet(sequences, z["user"], z["end"], z["target"], z["label"], max_history)


def save_dataset(split: DatasetSplit, out_dir):
    """Write the split as a self-describing directory (see README for layout)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(
        out / "pois.npz",
        poi_id=np.array([p.poi_id for p in split.pois], dtype=str),
        lat=np.array([p.lat for p in split.pois], dtype=np.float64),
        lon=np.array([p.lon for p in split.pois], dtype=np.float64),
    )
    lengths = np.array([len(s) for s in split.sequences], dtype=np.int64)
    offsets = np.zeros(len(lengths) + 1, np.int64)
    np.cumsum(lengths, out=offsets[1:])
    np.savez(
        out / "sequences.npz",
        offsets=offsets,
        pois=np.concatenate([s.pois for s in split.sequences]) if split.sequences else np.zeros(0, np.int64),
        timestamps=(np.concatenate([s.timestamps for s in split.sequences])
                    if split.sequences else np.zeros(0, np.int64)),
        user_id=np.array([s.user_id for s in split.sequences], dtype=str),
    )
    for name in ("train", "val", "test"):
        _save_examples(out / f"{name}.npz", getattr(split, name))
    manifest = {
        "format": DATASET_FORMAT,
        "files": ["pois.npz", "sequences.npz", "train.npz", "val.npz", "test.npz"],
        "stats": split.stats,
        "counts": {name: len(getattr(split, name)) for name in ("train", "val", "test")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir) -> DatasetSplit:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{data_dir}: unsupported dataset format {manifest.get('format')!r}")
    with np.load(data_dir / "pois.npz") as z:
        pois = [PoiRecord(str(pid), k, float(lon), float(lat))
                for k, (pid, lat, lon) in enumerate(zip(z["poi_id"], z["lat"], z["lon"]))]
    with np.load(data_dir / "sequences.npz") as z:
        off, flat, ts, uid = z["offsets"], z["pois"], z["timestamps"], z["user_id"]
        sequences = [CheckinSequence(u, flat[off[u]:off[u + 1]].copy(), ts[off[u]:off[u + 1]].copy(),
                                     str(uid[u])) for u in range(len(off) - 1)]
    stats = manifest["stats"]
    max_history = stats.get("max_history", DEFAULT_MAX_HISTORY)
    parts = [_load_examples(data_dir / f"{n}.npz", sequences, max_history) for n in ("train", "val", "test")]
    return DatasetSplit(pois, sequences, *parts, stats=stats)
