"""Exact cosine top-k index and retrieval-based zero-shot classification."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .teacher import read_embedding_file, save_embeddings


@dataclass(frozen=True)
class VectorIndex:
    dim: int
    ids: tuple[str, ...]
    vectors: np.ndarray  # count x dim, unit rows, read-only

    @property
    def count(self) -> int:
        return len(self.ids)

    def position(self, rid: str) -> int:
        try:
            return self._lookup()[rid]
        except KeyError:
            raise KeyError(f"unknown id {rid!r}") from None

    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_pos")
        if cache is None:
            cache = {r: i for i, r in enumerate(self.ids)}
            object.__setattr__(self, "_pos", cache)
        return cache


def build_index(entries: Sequence[tuple[str, np.ndarray]]) -> VectorIndex:
    entries = list(entries)
    if not entries:
        raise ValueError("cannot build an empty index")
    ids = [str(r) for r, _ in entries]
    if len(set(ids)) != len(ids):
        dup = next(r for r, c in Counter(ids).items() if c > 1)
        raise ValueError(f"duplicate id {dup!r}")
    mat = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for _, v in entries])
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero vector for id {ids[int(np.argmin(norms))]!r}")
    mat = mat / norms[:, None]
    mat.setflags(write=False)
    return VectorIndex(mat.shape[1], tuple(ids), mat)


def topk(index: VectorIndex, query, k: int) -> list[tuple[str, float]]:
    """Descending cosine; equal scores ordered by ascending id."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if not 1 <= k <= index.count:
        raise ValueError(f"k={k} outside [1, {index.count}]")
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero query vector")
    q = q / n
    # row-wise sum (not a BLAS gemv) so identical rows get bit-identical scores
    scores = (index.vectors * q).sum(axis=1)
    ids = np.asarray(index.ids)
    order = np.lexsort((ids, -scores))[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


@dataclass
class ZeroShotConfig:
    class_names: tuple[str, ...]
    k: int = 5
    aggregation: str = "mean-embedding"  # or "majority-vote"

    def validate(self) -> list[str]:
        errs = []
        if self.k < 1:
            errs.append("k must be >= 1")
        if len(self.class_names) < 2:
            errs.append("need at least two class names")
        if self.aggregation not in ("mean-embedding", "majority-vote"):
            errs.append(f"unknown aggregation {self.aggregation!r}")
        return errs


def _unit(m):
    m = np.asarray(m, dtype=np.float64)
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def zeroshot_classify(audio_embedding, index: VectorIndex, report_texts: dict[str, str], cfg: ZeroShotConfig,
                      text_embedder, class_vectors=None) -> tuple[str, np.ndarray]:
    """Retrieve the top-k reports for one clip and match them against class names.

    Returns the predicted class name and per-class cosine scores. No labels
    are read: only report texts and class-name strings reach the embedder.
    """
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    if index.count == 0:
        raise ValueError("empty index")
    hits = topk(index, audio_embedding, min(cfg.k, index.count))
    texts = []
    for rid, _ in hits:
        if rid not in report_texts:
            raise KeyError(f"unknown report id {rid!r}")
        texts.append(report_texts[rid])
    cls = _unit(class_vectors if class_vectors is not None else text_embedder.embed(list(cfg.class_names)))
    rep = _unit(text_embedder.embed(texts))
    mean_scores = _unit(rep.mean(axis=0)) @ cls.T if np.linalg.norm(rep.mean(axis=0)) > 0 else np.zeros(len(cls))
    if cfg.aggregation == "mean-embedding":
        return cfg.class_names[int(np.argmax(mean_scores))], mean_scores
    votes = np.argmax(rep @ cls.T, axis=1)
    counts = np.bincount(votes, minlength=len(cls))
    winners = np.flatnonzero(counts == counts.max())
    scores = counts / len(votes)
    if len(winners) > 1:
        pick = int(winners[np.argmax(mean_scores[winners])])
    else:
        pick = int(winners[0])
    return cfg.class_names[pick], scores + 1e-6 * mean_scores


def zeroshot_scores(audio_embeddings, index: VectorIndex, report_texts: dict[str, str], cfg: ZeroShotConfig,
                    text_embedder) -> tuple[list[str], np.ndarray]:
    cls = text_embedder.embed(list(cfg.class_names))
    preds, rows = [], []
    for a in np.asarray(audio_embeddings):
        p, s = zeroshot_classify(a, index, report_texts, cfg, text_embedder, class_vectors=cls)
        preds.append(p)
        rows.append(s)
    return preds, np.stack(rows)


@dataclass(frozen=True)
class Bridge:
    """Maps audio shared embeddings onto the report side of the shared space.

    A CKA objective fixes the two projections only up to a shift, a scale and
    an orthogonal turn. These are recovered from paired (audio, report)
    training rows with orthogonal Procrustes. No labels are involved.
    """

    audio_mean: np.ndarray
    text_mean: np.ndarray
    rotation: np.ndarray
    scale: float

    def audio(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.audio_mean) @ self.rotation * self.scale

    def text(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) - self.text_mean


def fit_bridge(audio, text) -> Bridge:
    from scipy.linalg import orthogonal_procrustes

    a = np.asarray(audio, dtype=np.float64)
    t = np.asarray(text, dtype=np.float64)
    if a.shape != t.shape or a.ndim != 2 or len(a) < 2:
        raise ValueError(f"need matching paired rows, got {a.shape} and {t.shape}")
    ma, mt = a.mean(axis=0), t.mean(axis=0)
    a0, t0 = a - ma, t - mt
    na, nt = np.linalg.norm(a0), np.linalg.norm(t0)
    if na == 0 or nt == 0:
        raise ValueError("paired rows have no spread")
    rot, _ = orthogonal_procrustes(a0, t0)
    return Bridge(ma, mt, rot, float(nt / na))


def save_index(path, index: VectorIndex, report_texts: dict[str, str] | None = None) -> None:
    """ACEMB01 vectors plus a JSON sidecar ``<path>.ids.json`` mapping id to report text."""
    save_embeddings(path, zip(index.ids, index.vectors), index.dim)
    side = {rid: (report_texts or {}).get(rid) for rid in index.ids}
    Path(str(path) + ".ids.json").write_text(json.dumps(side, sort_keys=True))


def load_index(path) -> tuple[VectorIndex, dict[str, str]]:
    _, records = read_embedding_file(path)
    side = Path(str(path) + ".ids.json")
    texts = json.loads(side.read_text()) if side.exists() else {}
    return build_index(records), {k: v for k, v in texts.items() if v is not None}
