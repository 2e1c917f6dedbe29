"""Frozen text teacher: report text -> unit vector.

Three providers share one contract (fixed dimension, unit L2 norm): a
signed feature-hashing embedder for offline use, a loader for precomputed
embeddings, and an HTTP client for a remote embedding service.

Remote protocol (JSON over HTTP POST to ``endpoint``)::

    request:  {"texts": ["...", ...], "dim": 2048}
    response: {"embeddings": [[float, ...], ...]}

One embedding per input text, in request order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TEACHER_DIM = 2048
_TOKEN = re.compile(r"[a-z0-9]+(?:[/'.-][a-z0-9]+)*")


class TeacherError(RuntimeError):
    pass


class TransportError(TeacherError):
    pass


class ProtocolError(TeacherError):
    pass


class DimensionError(TeacherError):
    pass


@dataclass(frozen=True)
class TeacherEmbedding:
    vector: np.ndarray
    source: str  # "hashed" | "file" | "remote"
    text_digest: str

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"teacher embedding norm {norm} is not 1")


def normalize_text(text: str) -> str:
    return " ".join(text.split())


def text_digest(text: str) -> str:
    return hashlib.sha256(normalize_text(text).encode()).hexdigest()


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(normalize_text(text).lower())


def _bucket(feature: str, dim: int, seed: int) -> tuple[int, float]:
    h = hashlib.blake2b(feature.encode(), digest_size=8, salt=struct.pack("<Q", seed & (2**64 - 1))).digest()
    v = int.from_bytes(h, "little")
    return (v >> 1) % dim, 1.0 if v & 1 else -1.0


def hash_embed(text: str, dim: int = TEACHER_DIM, seed: int = 0) -> TeacherEmbedding:
    """Signed hashing of lowercase word unigrams and bigrams, L2-normalized."""
    words = tokenize(text)
    if not words:
        raise ValueError("cannot embed empty text")
    vec = np.zeros(dim)
    feats = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
    for f in feats:
        i, s = _bucket(f, dim, seed)
        vec[i] += s
    norm = np.linalg.norm(vec)
    if norm == 0:
        # every feature cancelled out; fall back to the first unigram alone
        i, s = _bucket(words[0], dim, seed)
        vec[i], norm = s, 1.0
    return TeacherEmbedding(vec / norm, "hashed", text_digest(text))


class HashTeacher:
    """Offline provider; cheap and deterministic per (text, seed)."""

    def __init__(self, dim: int = TEACHER_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def embed(self, texts) -> np.ndarray:
        return np.stack([hash_embed(t, self.dim, self.seed).vector for t in texts])


class TableTeacher:
    """Provider backed by a mapping from text digest to vector."""

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.table = table
        self.dim = dim

    def embed(self, texts) -> np.ndarray:
        out = []
        for t in texts:
            d = text_digest(t)
            if d not in self.table:
                raise KeyError(f"no teacher embedding for text digest {d[:12]}")
            out.append(self.table[d])
        return np.stack(out)


# ----------------------------------------------------------- embedding files

EMB_MAGIC = b"ACEMB01\0"


def save_embeddings(path, records, dim: int | None = None) -> None:
    """magic, u32 dim, u32 count, then (u32 id length, id bytes, dim x f32) per record."""
    records = list(records)
    if dim is None:
        if not records:
            raise ValueError("dim is required for an empty file")
        dim = len(np.asarray(records[0][1]).reshape(-1))
    parts = [EMB_MAGIC, struct.pack("<II", dim, len(records))]
    for rid, vec in records:
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if len(v) != dim:
            raise DimensionError(f"record {rid!r} has dim {len(v)}, expected {dim}")
        key = str(rid).encode()
        parts.append(struct.pack("<I", len(key)) + key + v.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embedding_file(path) -> tuple[int, list[tuple[str, np.ndarray]]]:
    """Raw records as stored (float32 widened to float64, no renormalization)."""
    raw = Path(path).read_bytes()
    if raw[:8] != EMB_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not an ACEMB01 file")
    dim, count = struct.unpack("<II", raw[8:16])
    pos = 16
    out = []
    for _ in range(count):
        if pos + 4 > len(raw):
            raise ValueError(f"{path}: truncated record header")
        (klen,) = struct.unpack("<I", raw[pos:pos + 4])
        end = pos + 4 + klen + 4 * dim
        if end > len(raw):
            raise ValueError(f"{path}: truncated record")
        rid = raw[pos + 4:pos + 4 + klen].decode()
        vec = np.frombuffer(raw[pos + 4 + klen:end], dtype="<f4").astype(np.float64)
        out.append((rid, vec))
        pos = end
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return dim, out


def load_embeddings(path, dim: int | None = TEACHER_DIM) -> list[tuple[str, TeacherEmbedding]]:
    """Load, check ids and dimension, and renormalize to unit length."""
    file_dim, records = read_embedding_file(path)
    if dim is not None and file_dim != dim:
        raise DimensionError(f"{path}: file dim {file_dim} != configured {dim}")
    seen = set()
    out = []
    for rid, vec in records:
        if rid in seen:
            raise ValueError(f"{path}: duplicate id {rid!r}")
        seen.add(rid)
        norm = float(np.linalg.norm(vec))
        if norm == 0:
            raise ValueError(f"{path}: zero vector for id {rid!r}")
        if abs(norm - 1.0) > 1e-6:
            log.warning("renormalizing embedding %r (norm %.6f)", rid, norm)
        out.append((rid, TeacherEmbedding(vec / norm, "file", rid)))
    return out


# -------------------------------------------------------------- remote client


@dataclass
class EndpointConfig:
    url: str
    dim: int = TEACHER_DIM
    max_batch: int = 64
    max_retries: int = 3
    backoff: float = 0.5
    timeout: float = 30.0
    cache_dir: str | None = None


def _http_post(url: str, payload: dict, timeout: float) -> dict:
    import requests

    try:
        resp = requests.post(url, json=payload, timeout=timeout)
        resp.raise_for_status()
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    try:
        return resp.json()
    except ValueError as exc:
        raise ProtocolError(f"response is not JSON: {exc}") from exc


def fetch_remote(cfg: EndpointConfig, texts, post=_http_post) -> list[TeacherEmbedding]:
    """Embed ``texts`` through the remote endpoint, using the on-disk cache first.

    ``post(url, payload, timeout) -> dict`` is injectable for testing.
    """
    texts = list(texts)
    if len(texts) > cfg.max_batch:
        raise ValueError(f"batch of {len(texts)} exceeds max_batch {cfg.max_batch}")
    cache = Path(cfg.cache_dir) if cfg.cache_dir else None
    results: dict[int, TeacherEmbedding] = {}
    missing = []
    for i, t in enumerate(texts):
        d = text_digest(t)
        f = cache / f"{d}.npy" if cache else None
        if f is not None and f.exists():
            results[i] = TeacherEmbedding(np.load(f), "remote", d)
        else:
            missing.append(i)
    if missing:
        vectors = _fetch_with_retry(cfg, [texts[i] for i in missing], post)
        for i, v in zip(missing, vectors):
            d = text_digest(texts[i])
            emb = TeacherEmbedding(v, "remote", d)
            if cache is not None:
                cache.mkdir(parents=True, exist_ok=True)
                np.save(cache / f"{d}.npy", emb.vector)
            results[i] = emb
    return [results[i] for i in range(len(texts))]


def _fetch_with_retry(cfg: EndpointConfig, texts, post) -> list[np.ndarray]:
    last = None
    for attempt in range(cfg.max_retries + 1):
        try:
            body = post(cfg.url, {"texts": texts, "dim": cfg.dim}, cfg.timeout)
            return _parse_response(body, len(texts), cfg.dim)
        except TeacherError as exc:
            last = exc
            log.warning("teacher request failed (attempt %d): %s", attempt + 1, exc)
            if attempt < cfg.max_retries:
                time.sleep(cfg.backoff * 2 ** attempt)
    raise last


def _parse_response(body, count: int, dim: int) -> list[np.ndarray]:
    if not isinstance(body, dict) or "embeddings" not in body:
        raise ProtocolError("response lacks an 'embeddings' list")
    embs = body["embeddings"]
    if not isinstance(embs, list) or len(embs) != count:
        raise ProtocolError(f"expected {count} embeddings, got {len(embs) if isinstance(embs, list) else type(embs)}")
    out = []
    for e in embs:
        v = np.asarray(e, dtype=np.float64).reshape(-1)
        if len(v) != dim:
            raise DimensionError(f"embedding has dim {len(v)}, expected {dim}")
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ProtocolError("embedding is zero or non-finite")
        out.append(v / n)
    return out


class RemoteTeacher:
    def __init__(self, cfg: EndpointConfig, post=_http_post):
        self.cfg = cfg
        self.dim = cfg.dim
        self.post = post

    def embed(self, texts) -> np.ndarray:
        texts = list(texts)
        out = []
        for i in range(0, len(texts), self.cfg.max_batch):
            out.extend(e.vector for e in fetch_remote(self.cfg, texts[i:i + self.cfg.max_batch], self.post))
        return np.stack(out)


def embed_reports(teacher, texts) -> dict[str, np.ndarray]:
    """Digest -> vector for every distinct text; the single source used downstream."""
    uniq = {}
    for t in texts:
        uniq.setdefault(text_digest(t), t)
    keys = list(uniq)
    vecs = teacher.embed([uniq[k] for k in keys]) if keys else np.zeros((0, teacher.dim))
    return {k: v for k, v in zip(keys, vecs)}
