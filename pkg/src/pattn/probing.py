"""Linear probes measuring how much position information encoder states carry.

Three diagnostics over frozen hidden states: predict a token's absolute
position, the signed distance of a sampled token pair, and the order of a
pair. Each probe is a single linear map trained with plain minibatch
gradient descent; the probed model is never touched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass
class ProbeConfig:
    task: str = "absolute"  # absolute | relative | order
    layer: int = -1
    max_classes: int = 512        # K: max input length (absolute), max distance (pair tasks)
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 256
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass
class StateRecord:
    """One token occurrence: its hidden row plus the metadata every task needs."""

    hidden: np.ndarray
    position: int   # 0-based index within the serialized sequence
    seq_len: int
    seq_id: int


def extract_states(model, sequences, layer: int) -> list[StateRecord]:
    """Hidden rows of one encoder layer for every token of every sequence.

    Layer 0 is the embedded input; dropout stays off.
    """
    n_layers = model.cfg.n_enc_layers
    if not 0 <= layer <= n_layers:
        raise ContractError(f"layer {layer} outside exported range 0..{n_layers}")
    records = []
    for seq_id, ids in enumerate(sequences):
        states = model.encode(ids)[layer].data
        n = states.shape[0]
        for i in range(n):
            records.append(StateRecord(states[i].astype(np.float64), i, n, seq_id))
    return records


def split_by_sequence(records, fractions, seed):
    """Deterministic train/valid/test partition on whole sequences."""
    seq_ids = sorted({r.seq_id for r in records})
    rng = np.random.default_rng(seed)
    rng.shuffle(seq_ids)
    n = len(seq_ids)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    train_ids = set(seq_ids[:n_train])
    valid_ids = set(seq_ids[n_train:n_train + n_valid])
    buckets = ([], [], [])
    for r in records:
        if r.seq_id in train_ids:
            buckets[0].append(r)
        elif r.seq_id in valid_ids:
            buckets[1].append(r)
        else:
            buckets[2].append(r)
    return buckets


class ProbeClassifier:
    """Single linear map + softmax, trained with minibatch gradient descent."""

    def __init__(self, n_classes: int, dim: int, seed: int = 0):
        self.weights = np.zeros((n_classes, dim))
        self.seed = seed

    def fit(self, x: np.ndarray, y: np.ndarray, epochs: int, lr: float, batch_size: int):
        rng = np.random.default_rng(self.seed)
        n = x.shape[0]
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                xb, yb = x[idx], y[idx]
                logits = xb @ self.weights.T
                logits -= logits.max(axis=1, keepdims=True)
                p = np.exp(logits)
                p /= p.sum(axis=1, keepdims=True)
                p[np.arange(len(yb)), yb] -= 1.0
                self.weights -= lr * (p.T @ xb) / len(yb)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(x @ self.weights.T, axis=1)


@dataclass
class ProbeReport:
    """Rows of (task, layer, bucket, accuracy, relaxed accuracy or None)."""

    rows: list = field(default_factory=list)

    def add(self, task, layer, bucket, accuracy, relaxed=None):
        self.rows.append({"task": task, "layer": layer, "bucket": bucket,
                          "accuracy": accuracy, "relaxed_accuracy": relaxed})

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["task", "layer", "bucket", "accuracy", "relaxed_accuracy"])
            for r in self.rows:
                relaxed = "" if r["relaxed_accuracy"] is None else f"{r['relaxed_accuracy']:.4f}"
                writer.writerow([r["task"], r["layer"], r["bucket"],
                                 f"{r['accuracy']:.4f}", relaxed])


def probe_absolute(records, cfg: ProbeConfig) -> dict:
    """Train the K-way position classifier; report exact and +/-3-window accuracy."""
    records = [r for r in records if r.position < cfg.max_classes]
    train, _, test = split_by_sequence(records, cfg.split, cfg.seed)
    if not train or not test:
        raise ContractError("probe split produced an empty train or test set")
    if len({r.position for r in train}) < 2:
        raise ContractError("degenerate probe: a single position class in training data")
    x_train = np.stack([r.hidden for r in train])
    y_train = np.array([r.position for r in train])
    clf = ProbeClassifier(cfg.max_classes, x_train.shape[1], seed=cfg.seed)
    clf.fit(x_train, y_train, cfg.epochs, cfg.lr, cfg.batch_size)
    x_test = np.stack([r.hidden for r in test])
    y_test = np.array([r.position for r in test])
    pred = clf.predict(x_test)
    exact = 100.0 * float(np.mean(pred == y_test))
    relaxed = 100.0 * float(np.mean(np.abs(pred - y_test) <= 3))
    return {"accuracy": exact, "relaxed_accuracy": relaxed, "n_test": len(test)}


def sample_pairs(records, max_distance: int = 20, seed: int = 0):
    """I pairs per length-I sequence: each anchor i gets one j uniform over
    the +/-max_distance window (excluding i), clipped to the sequence."""
    by_seq = {}
    for r in records:
        by_seq.setdefault(r.seq_id, []).append(r)
    rng = np.random.default_rng(seed)
    pairs = []
    for seq_id in sorted(by_seq):
        rows = sorted(by_seq[seq_id], key=lambda r: r.position)
        n = len(rows)
        if n < 2:
            continue
        for i in range(n):
            lo = max(0, i - max_distance)
            hi = min(n - 1, i + max_distance)
            choices = [j for j in range(lo, hi + 1) if j != i]
            j = choices[rng.integers(0, len(choices))]
            pairs.append((rows[i], rows[j]))
    return pairs


def _pair_features_labels(pairs, max_distance, task):
    feats, labels, distances = [], [], []
    for a, b in pairs:
        d = a.position - b.position
        if d == 0:
            raise ContractError("zero-distance pair is not a valid probe example")
        if abs(d) > max_distance:
            raise ContractError(f"pair distance {d} exceeds window {max_distance}")
        feats.append(a.hidden - b.hidden)
        distances.append(d)
        if task == "relative":
            labels.append(d + max_distance if d < 0 else d + max_distance - 1)
        else:  # order: 0 for i > j, 1 for i < j
            labels.append(0 if d > 0 else 1)
    return np.stack(feats), np.array(labels), np.array(distances)


def _probe_pairs(pairs, cfg: ProbeConfig, task: str, n_classes: int) -> dict:
    train_pairs, _, test_pairs = split_by_sequence(
        [_PairView(a, b) for a, b in pairs], cfg.split, cfg.seed)
    train_pairs = [(p.a, p.b) for p in train_pairs]
    test_pairs = [(p.a, p.b) for p in test_pairs]
    if not train_pairs or not test_pairs:
        raise ContractError("probe split produced an empty train or test set")
    x_train, y_train, _ = _pair_features_labels(train_pairs, cfg.max_classes, task)
    clf = ProbeClassifier(n_classes, x_train.shape[1], seed=cfg.seed)
    clf.fit(x_train, y_train, cfg.epochs, cfg.lr, cfg.batch_size)
    x_test, y_test, dist = _pair_features_labels(test_pairs, cfg.max_classes, task)
    pred = clf.predict(x_test)
    correct = pred == y_test
    by_distance = {}
    for d in range(-cfg.max_classes, cfg.max_classes + 1):
        if d == 0:
            continue
        sel = dist == d
        by_distance[d] = 100.0 * float(correct[sel].mean()) if sel.any() else float("nan")
    overall = 100.0 * float(correct.mean())
    return {"accuracy": overall, "by_distance": by_distance, "n_test": len(test_pairs)}


class _PairView:
    """Adapter so pair examples split by the anchor token's sequence."""

    __slots__ = ("a", "b", "seq_id")

    def __init__(self, a, b):
        self.a, self.b = a, b
        self.seq_id = a.seq_id


def probe_relative(pairs, cfg: ProbeConfig) -> dict:
    """2K-way signed-distance classification on h_i - h_j."""
    return _probe_pairs(pairs, cfg, "relative", 2 * cfg.max_classes)


def probe_order(pairs, cfg: ProbeConfig) -> dict:
    """Binary word-order classification on h_i - h_j."""
    return _probe_pairs(pairs, cfg, "order", 2)


def run_probe(model, sequences, cfg: ProbeConfig) -> ProbeReport:
    """End-to-end: extract states, train the requested probe, build the report."""
    layer = cfg.layer if cfg.layer >= 0 else model.cfg.n_enc_layers
    records = extract_states(model, sequences, layer)
    report = ProbeReport()
    if cfg.task == "absolute":
        result = probe_absolute(records, cfg)
        report.add("absolute", layer, "all", result["accuracy"],
                   result["relaxed_accuracy"])
    elif cfg.task in ("relative", "order"):
        pairs = sample_pairs(records, cfg.max_classes, seed=cfg.seed)
        result = (probe_relative if cfg.task == "relative" else probe_order)(pairs, cfg)
        for d in sorted(result["by_distance"]):
            report.add(cfg.task, layer, d, result["by_distance"][d])
    else:
        raise ContractError(f"unknown probe task {cfg.task!r}")
    return report
