"""Linear probes on frozen embeddings, AUROC / MAE and cross-validation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata


# -------------------------------------------------------------------- metrics


def binary_auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with average ranks, so ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(scores, labels, classes=None) -> float:
    """Binary AUROC for 1-d scores; macro one-vs-rest for an N x C score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        return binary_auroc(s, labels)
    labels = np.asarray(labels)
    classes = list(range(s.shape[1])) if classes is None else list(classes)
    if len(classes) != s.shape[1]:
        raise ValueError("one score column per class is required")
    present = [c for c in classes if np.any(labels == c)]
    if len(present) < 2:
        raise ValueError("AUROC needs at least two classes present")
    return float(np.mean([binary_auroc(s[:, j], labels == c) for j, c in enumerate(classes) if c in present]))


def mae(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("MAE of empty input")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


# ---------------------------------------------------------------------- probe


@dataclass
class ProbeConfig:
    task: str = "classification"  # or "regression"
    head: str = "linear"  # or "mlp"
    hidden: int = 64
    lr: float = 1e-4
    l2: float = 1e-4
    decay: float = 0.97
    patience: int = 5
    max_epochs: int = 300
    batch_size: int = 32
    val_fraction: float = 0.2
    standardize: bool = False
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        if self.patience < 1:
            errs.append("patience must be >= 1")
        if self.lr <= 0:
            errs.append("lr must be positive")
        if self.task not in ("classification", "regression"):
            errs.append(f"unknown task kind {self.task!r}")
        if self.head not in ("linear", "mlp"):
            errs.append(f"unknown head kind {self.head!r}")
        if not 0 < self.val_fraction < 1:
            errs.append("val_fraction must be in (0, 1)")
        return errs


@dataclass
class Probe:
    params: dict[str, np.ndarray]
    head: str
    task: str
    classes: list
    mean: np.ndarray
    scale: np.ndarray
    val_curve: list[float] = field(default_factory=list)
    lr_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def _forward(self, x):
        x = (x - self.mean) / self.scale
        p = self.params
        if self.head == "mlp":
            x = np.maximum(x @ p["w0"] + p["b0"], 0.0)
        return x @ p["w"] + p["b"]

    def scores(self, x) -> np.ndarray:
        out = self._forward(np.asarray(x, dtype=np.float64))
        if self.task == "regression":
            return out[:, 0]
        out = out - out.max(axis=1, keepdims=True)
        e = np.exp(out)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x):
        s = self.scores(x)
        if self.task == "regression":
            return s
        return np.asarray(self.classes)[np.argmax(s, axis=1)]


def _init_probe(d: int, out: int, cfg: ProbeConfig, rng) -> dict[str, np.ndarray]:
    if cfg.head == "mlp":
        b = 1 / math.sqrt(d)
        return {"w0": rng.uniform(-b, b, (d, cfg.hidden)), "b0": np.zeros(cfg.hidden),
                "w": np.zeros((cfg.hidden, out)), "b": np.zeros(out)}
    return {"w": np.zeros((d, out)), "b": np.zeros(out)}


def _loss_grad(params, x, y, cfg: ProbeConfig):
    """Mean cross-entropy (or squared error) plus L2 on weights; returns loss, grads."""
    h = x
    if cfg.head == "mlp":
        pre = x @ params["w0"] + params["b0"]
        h = np.maximum(pre, 0.0)
    z = h @ params["w"] + params["b"]
    n = len(x)
    if cfg.task == "classification":
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
        dz = p
        dz[np.arange(n), y] -= 1.0
        dz /= n
    else:
        d = z[:, 0] - y
        loss = np.mean(d * d)
        dz = (2.0 * d / n)[:, None]
    grads = {"w": h.T @ dz + 2 * cfg.l2 * params["w"], "b": dz.sum(axis=0)}
    loss += cfg.l2 * float(np.sum(params["w"] ** 2))
    if cfg.head == "mlp":
        dh = (dz @ params["w"].T) * (pre > 0)
        grads["w0"] = x.T @ dh + 2 * cfg.l2 * params["w0"]
        grads["b0"] = dh.sum(axis=0)
        loss += cfg.l2 * float(np.sum(params["w0"] ** 2))
    return loss, grads


def _val_metric(probe: Probe, x, y, cfg: ProbeConfig) -> float:
    """Higher is better: AUROC for classification, -MAE for regression."""
    if cfg.task == "regression":
        return -mae(probe.scores(x), y)
    s = probe.scores(x)
    try:
        return auroc(s, y, classes=list(range(len(probe.classes))))
    except ValueError:
        # validation split with a single class: fall back to negative loss
        return -float(np.mean(-np.log(s[np.arange(len(y)), y] + 1e-300)))


def stratified_split(targets, fraction: float, seed: int, task: str = "classification"):
    """Seeded train/val index split, stratified by class for classification."""
    rng = np.random.default_rng(seed)
    t = np.asarray(targets)
    val = []
    groups = [np.flatnonzero(t == c) for c in np.unique(t)] if task == "classification" else [np.arange(len(t))]
    for idx in groups:
        idx = rng.permutation(idx)
        k = int(round(len(idx) * fraction))
        if task == "classification" and len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        val.extend(idx[:k].tolist())
    val = np.sort(np.asarray(val, dtype=int))
    train = np.setdiff1d(np.arange(len(t)), val)
    return train, val


def train_probe(features, targets, cfg: ProbeConfig, train_idx=None, val_idx=None) -> Probe:
    """Adam on frozen features with per-epoch lr decay and early stopping.

    Returns the parameters from the best validation epoch.
    """
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    x_all = np.asarray(features, dtype=np.float64)
    t_all = np.asarray(targets)
    if train_idx is None or val_idx is None:
        train_idx, val_idx = stratified_split(t_all, cfg.val_fraction, cfg.seed, cfg.task)
    if len(np.intersect1d(train_idx, val_idx)):
        raise ValueError("train and validation splits overlap")
    if cfg.task == "classification":
        classes = sorted(np.unique(t_all[train_idx]).tolist())
        if len(classes) < 2:
            raise ValueError("classification probe needs at least two classes in the training split")
        lookup = {c: i for i, c in enumerate(classes)}
        y_all = np.array([lookup.get(c, -1) for c in t_all.tolist()])
        out_dim = len(classes)
    else:
        classes = []
        y_all = t_all.astype(np.float64)
        out_dim = 1
    xtr, ytr = x_all[train_idx], y_all[train_idx]
    xva, yva = x_all[val_idx], y_all[val_idx]
    if cfg.task == "classification":
        keep = yva >= 0
        xva, yva = xva[keep], yva[keep]
    if cfg.standardize:
        mean = xtr.mean(axis=0)
        scale = xtr.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(x_all.shape[1]), np.ones(x_all.shape[1])
    ztr = (xtr - mean) / scale
    rng = np.random.default_rng([cfg.seed, 7])
    params = _init_probe(x_all.shape[1], out_dim, cfg, rng)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    probe = Probe(params, cfg.head, cfg.task, classes, mean, scale)
    best = -np.inf
    best_params = {k: p.copy() for k, p in params.items()}
    stale = 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr * cfg.decay ** epoch
        order = rng.permutation(len(ztr))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, g = _loss_grad(params, ztr[idx], ytr[idx], cfg)
            t += 1
            for k in params:
                m[k] = b1 * m[k] + (1 - b1) * g[k]
                v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
                params[k] = params[k] - lr * (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + eps)
        probe.params = params
        score = _val_metric(probe, xva, yva, cfg)
        probe.val_curve.append(score)
        probe.lr_curve.append(lr)
        if score > best:
            best, stale = score, 0
            best_params = {k: p.copy() for k, p in params.items()}
            probe.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    probe.params = best_params
    return probe


# ------------------------------------------------------------ protocols


@dataclass
class EvalResult:
    task: str
    metric: str
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float | None:
        return float(np.std(self.values)) if len(self.values) >= 2 else None

    def row(self) -> dict:
        std = self.std
        return {"task": self.task, "metric": self.metric, "mean": f"{self.mean:.6f}",
                "std": "" if std is None else f"{std:.6f}",
                "values": ";".join(f"{x:.6f}" for x in self.values)}


def multi_seed(run_fn: Callable[[int], float], seeds: Sequence[int] = (0, 1, 2, 3, 4),
               task: str = "task", metric: str = "auroc") -> EvalResult:
    return EvalResult(task, metric, [float(run_fn(s)) for s in seeds])


def subject_split(subject_ids, test_fraction: float, seed: int):
    """Subject-disjoint train/test indices."""
    subs = np.asarray(subject_ids)
    uniq = np.unique(subs)
    if len(uniq) < 2:
        raise ValueError("need at least two subjects for a subject-disjoint split")
    rng = np.random.default_rng(seed)
    k = min(max(1, int(round(len(uniq) * test_fraction))), len(uniq) - 1)
    test_subs = set(rng.permutation(uniq)[:k].tolist())
    test = np.array([i for i, s in enumerate(subs) if s in test_subs], dtype=int)
    train = np.setdiff1d(np.arange(len(subs)), test)
    return train, test


def probe_auroc(features, labels, train_idx, test_idx, cfg: ProbeConfig) -> float:
    """Fit on ``train_idx`` (with an internal validation split), score ``test_idx``."""
    labels = np.asarray(labels)
    inner_tr, inner_va = stratified_split(labels[train_idx], cfg.val_fraction, cfg.seed)
    probe = train_probe(features, labels, cfg, np.asarray(train_idx)[inner_tr], np.asarray(train_idx)[inner_va])
    s = probe.scores(np.asarray(features)[test_idx])
    return auroc(s, labels[test_idx], classes=probe.classes)


@dataclass
class LosoResult:
    per_subject: dict[str, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_subject.values())))


def loso_cv(features, subject_ids, targets, cfg: ProbeConfig) -> LosoResult:
    """One fold per subject; the held-out subject never enters that fold's training set."""
    subs = np.asarray(subject_ids)
    uniq = sorted(np.unique(subs).tolist())
    if len(uniq) < 2:
        raise ValueError("LOSO needs at least two subjects")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    out = {}
    for s in uniq:
        test = np.flatnonzero(subs == s)
        train = np.flatnonzero(subs != s)
        assert not np.intersect1d(test, train).size
        tr, va = stratified_split(y[train], cfg.val_fraction, cfg.seed, "regression")
        probe = train_probe(x, y, ProbeConfig(**{**cfg.__dict__, "task": "regression"}), train[tr], train[va])
        out[s] = mae(probe.scores(x[test]), y[test])
    return LosoResult(out)


CSV_COLUMNS = ("task", "metric", "mean", "std", "values")


def write_results_csv(path, results: Sequence[EvalResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def append_run_log(path, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
