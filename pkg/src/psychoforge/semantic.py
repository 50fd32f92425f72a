"""Item embeddings, cross-instrument similarity and an exact t-SNE.

Embeddings are looked up in a content-addressed JSONL cache before any model
is consulted. Two providers exist: a remote OpenAI-compatible
``/embeddings`` endpoint and a local hashed n-gram embedder (model names
starting with ``local/``) that needs no network and is what the shipped
fixture cache was built with.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np

from .scales import DOMAINS, ScaleDefinition, data_path

log = logging.getLogger(__name__)

LOCAL_MODEL = "local/hashed-ngram-1024"
REMOTE_MODEL = "text-embedding-3-large"
FIXTURE_CACHE = "embeddings_fixture.jsonl"
STUDY1_SCALES = ("bfi2", "mini_markers", "bfi", "ipip50")


class EmbeddingError(RuntimeError):
    pass


class CacheMiss(EmbeddingError):
    def __init__(self, text: str):
        super().__init__(f"offline mode: no cached embedding for {text!r}")
        self.text = text


class TsneError(RuntimeError):
    pass


# -- records and cache ------------------------------------------------------------

def content_hash(text: str, model_name: str) -> str:
    return hashlib.sha256(f"{model_name}\x00{text}".encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EmbeddingRecord:
    text: str
    model_name: str
    vector: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise EmbeddingError(f"embedding for {self.text!r} is not a finite vector")
        object.__setattr__(self, "vector", v)

    @property
    def content_hash(self) -> str:
        return content_hash(self.text, self.model_name)

    def to_json(self) -> str:
        blob = base64.b64encode(self.vector.astype("<f4").tobytes()).decode("ascii")
        doc = {"hash": self.content_hash, "model": self.model_name, "text": self.text, "dim": int(self.vector.size), "vector": blob}
        return json.dumps(doc, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EmbeddingRecord":
        doc = json.loads(line)
        vec = np.frombuffer(base64.b64decode(doc["vector"]), dtype="<f4")
        if vec.size != doc["dim"]:
            raise EmbeddingError(f"cache record for {doc['text']!r} has a truncated vector")
        rec = cls(doc["text"], doc["model"], vec)
        if rec.content_hash != doc["hash"]:
            raise EmbeddingError(f"cache record for {doc['text']!r} fails its hash check")
        return rec


class EmbeddingCache:
    """Append-only JSONL store keyed by content hash. Writes are serialised."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._records: dict[str, EmbeddingRecord] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = EmbeddingRecord.from_json(line)
                        self._records[rec.content_hash] = rec

    def __len__(self) -> int:
        return len(self._records)

    def get(self, text: str, model_name: str) -> EmbeddingRecord | None:
        return self._records.get(content_hash(text, model_name))

    def put(self, records: Iterable[EmbeddingRecord]) -> None:
        with self._lock:
            new = [r for r in records if r.content_hash not in self._records]
            for r in new:
                self._records[r.content_hash] = r
            if self.path is not None and new:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.writelines(r.to_json() + "\n" for r in new)


def fixture_cache() -> EmbeddingCache:
    return EmbeddingCache(data_path(FIXTURE_CACHE))


# -- providers ------------------------------------------------------------------------

_WORD = re.compile(r"[a-z']+")


def _features(text: str) -> Counter:
    words = _WORD.findall(text.lower())
    feats = Counter(f"w:{w}" for w in words)
    for w in words:
        padded = f" {w} "
        feats.update(f"c:{padded[k:k + 3]}" for k in range(len(padded) - 2))
    return feats


def local_embed(text: str, dim: int = 1024) -> np.ndarray:
    """Signed feature hashing of word unigrams and character trigrams.

    Term frequencies are damped as ``1 + log(tf)`` and the result is L2
    normalised. Deterministic on every platform.
    """
    vec = np.zeros(dim)
    for feat, tf in sorted(_features(text).items()):
        h = hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest()
        k = int.from_bytes(h[:4], "little") % dim
        sign = 1.0 if h[4] & 1 else -1.0
        vec[k] += sign * (1 + math.log(tf))
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise EmbeddingError(f"text {text!r} has no embeddable tokens")
    return vec / norm


def _local_dim(model_name: str) -> int:
    try:
        return int(model_name.rsplit("-", 1)[1])
    except (IndexError, ValueError):
        raise EmbeddingError(f"cannot read a dimension from local model name {model_name!r}") from None


def remote_embed(
    texts: Sequence[str],
    model_name: str,
    api_key: str,
    base_url: str,
    max_retries: int = 3,
    backoff: float = 1.0,
) -> list[np.ndarray]:
    url = base_url.rstrip("/") + "/embeddings"
    headers = {"Authorization": f"Bearer {api_key}"}
    for attempt in range(max_retries + 1):
        try:
            r = httpx.post(url, json={"model": model_name, "input": list(texts)}, headers=headers, timeout=60)
            if r.status_code == 200:
                data = sorted(r.json()["data"], key=lambda d: d["index"])
                return [np.asarray(d["embedding"], dtype=float) for d in data]
            reason = f"HTTP {r.status_code}"
            if r.status_code not in (408, 409, 429) and r.status_code < 500:
                raise EmbeddingError(f"embedding request failed: {reason}: {r.text[:200]}")
        except httpx.TransportError as exc:
            reason = str(exc)
        if attempt < max_retries:
            time.sleep(backoff * 2**attempt)
    raise EmbeddingError(f"embedding request failed after {max_retries + 1} attempts ({reason})")


def embed_texts(
    texts: Sequence[str],
    model_name: str = LOCAL_MODEL,
    cache: EmbeddingCache | None = None,
    offline: bool = False,
    batch_size: int = 64,
) -> list[EmbeddingRecord]:
    """Cache-first embedding; output order follows ``texts``."""
    cache = cache if cache is not None else EmbeddingCache(None)
    out: dict[str, EmbeddingRecord] = {}
    missing: list[str] = []
    for t in dict.fromkeys(texts):
        rec = cache.get(t, model_name)
        if rec is not None:
            out[t] = rec
        elif offline:
            raise CacheMiss(t)
        else:
            missing.append(t)
    if missing:
        if model_name.startswith("local/"):
            dim = _local_dim(model_name)
            fresh = [EmbeddingRecord(t, model_name, local_embed(t, dim)) for t in missing]
        else:
            key = os.environ.get("PSYCHOFORGE_API_KEY")
            if not key:
                raise EmbeddingError("remote embeddings need PSYCHOFORGE_API_KEY")
            base = os.environ.get("PSYCHOFORGE_API_BASE", "https://api.openai.com/v1")
            fresh = []
            for k in range(0, len(missing), batch_size):
                chunk = missing[k : k + batch_size]
                vecs = remote_embed(chunk, model_name, key, base)
                fresh.extend(EmbeddingRecord(t, model_name, v) for t, v in zip(chunk, vecs))
        log.info("embedded %d new texts with %s", len(fresh), model_name)
        cache.put(fresh)
        out.update((r.text, r) for r in fresh)
    records = [out[t] for t in texts]
    if len({r.vector.size for r in records}) > 1:
        raise EmbeddingError("embedding dimension changed within a run")
    return records


# -- similarity ---------------------------------------------------------------------------

def cosine(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError("cosine needs vectors of equal dimension")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class EmbeddedTest:
    name: str
    domains: list[str]
    vectors: np.ndarray

    def domain_vectors(self, domain: str) -> np.ndarray:
        idx = [k for k, d in enumerate(self.domains) if d == domain]
        return self.vectors[idx]


def embed_scale(scale: ScaleDefinition, records: Sequence[EmbeddingRecord]) -> EmbeddedTest:
    return EmbeddedTest(scale.name, [it.domain for it in scale.items], np.stack([r.vector for r in records]).astype(float))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.sqrt((m * m).sum(axis=1))
    if np.any(norms == 0):
        raise ValueError("cosine is undefined for a zero vector")
    return m / norms[:, None]


def domain_similarity(a: EmbeddedTest, b: EmbeddedTest, domain: str, method: str = "pairwise") -> float:
    """Mean cosine over all cross-test item pairs in ``domain`` (or centroid cosine)."""
    va, vb = a.domain_vectors(domain), b.domain_vectors(domain)
    if len(va) == 0 or len(vb) == 0:
        raise ValueError(f"domain {domain} is empty in {a.name if len(va) == 0 else b.name}")
    if method == "centroid":
        return cosine(va.mean(axis=0), vb.mean(axis=0))
    if method != "pairwise":
        raise ValueError(f"unknown aggregation {method!r}")
    ua, ub = _unit_rows(va), _unit_rows(vb)
    # elementwise products keep the sum independent of the BLAS in use
    sims = (ua[:, None, :] * ub[None, :, :]).sum(axis=2)
    return float(np.clip(sims, -1, 1).mean())


@dataclass
class SimilarityPanels:
    tests: list[str]
    panels: dict[str, np.ndarray]

    def mean_cross_similarity(self, panel: str = "overall") -> dict[str, float]:
        m = self.panels[panel]
        n = len(self.tests)
        return {t: float((m[k].sum() - m[k, k]) / (n - 1)) for k, t in enumerate(self.tests)}


def similarity_panels(tests: Sequence[EmbeddedTest], method: str = "pairwise") -> SimilarityPanels:
    """One test-by-test matrix per domain plus their average (``overall``).

    The diagonal is fixed at 1: a test compared with itself.
    """
    n = len(tests)
    panels = {}
    for d in DOMAINS:
        m = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                m[i, j] = m[j, i] = domain_similarity(tests[i], tests[j], d, method)
        panels[d] = m
    panels["overall"] = sum(panels[d] for d in DOMAINS) / len(DOMAINS)
    return SimilarityPanels([t.name for t in tests], panels)


# -- t-SNE ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class TsneConfig:
    perplexity: float | None = None
    learning_rate: float = 200.0
    iterations: int = 1000
    momentum: tuple[float, float] = (0.5, 0.8)
    exaggeration: float = 12.0
    seed: int = 0
    perplexity_tol: float = 1e-5
    search_steps: int = 50

    def resolved_perplexity(self, n: int) -> float:
        return self.perplexity if self.perplexity is not None else min(30.0, (n - 1) / 3)


@dataclass
class TsneResult:
    points: np.ndarray
    kl_trace: list[float]
    labels: list[tuple[str, str]]
    exaggeration_end: int
    perplexities: np.ndarray = field(repr=False, default=None)


def _sq_distances(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    D = np.empty((n, n))
    for i in range(n):
        diff = X - X[i]
        D[i] = (diff * diff).sum(axis=1)
    return D


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # shift by the minimum distance for numerical stability; P is unaffected
    w = np.exp(-(d - d.min()) * beta)
    s = w.sum()
    p = w / s
    h = float(beta * (p * (d - d.min())).sum() + math.log(s))
    return h, p


def conditional_affinities(D: np.ndarray, perplexity: float, tol: float = 1e-5, steps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Gaussian affinities whose perplexity matches the target.

    Each row's precision is found by bisection on ``log(beta)`` after
    bracketing. Returns ``P`` (rows sum to 1) and the achieved perplexities.
    """
    n = D.shape[0]
    P = np.zeros((n, n))
    achieved = np.empty(n)
    target = perplexity
    for i in range(n):
        d = np.delete(D[i], i)
        lo, hi = -math.inf, math.inf
        log_beta = 0.0
        for _ in range(steps):
            h, p = _row_entropy(d, math.exp(log_beta))
            perp = math.exp(h)
            if abs(perp - target) < tol:
                break
            if perp > target:
                lo = log_beta
                log_beta = log_beta + 2 if hi == math.inf else (lo + hi) / 2
            else:
                hi = log_beta
                log_beta = log_beta - 2 if lo == -math.inf else (lo + hi) / 2
        achieved[i] = perp
        P[i, np.arange(n) != i] = p
    return P, achieved


def joint_affinities(X: np.ndarray, perplexity: float, tol: float = 1e-5, steps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    n = X.shape[0]
    if not 0 < perplexity <= (n - 1) / 3:
        raise TsneError(f"perplexity {perplexity:g} infeasible for n={n}; need 0 < perplexity <= (n-1)/3")
    Pc, achieved = conditional_affinities(_sq_distances(X), perplexity, tol, steps)
    P = (Pc + Pc.T) / (2 * n)
    return np.maximum(P, 1e-12), achieved


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = ~np.eye(P.shape[0], dtype=bool)
    return float(max(0.0, (P[mask] * np.log(P[mask] / Q[mask])).sum()))


def tsne_fit(
    X: np.ndarray,
    config: TsneConfig = TsneConfig(),
    labels: Sequence[tuple[str, str]] | None = None,
) -> TsneResult:
    """Exact t-SNE with early exaggeration, momentum and adaptive gains.

    Pairwise terms are formed elementwise rather than through matrix products
    so that results do not depend on the linear-algebra backend.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < 4:
        raise TsneError("t-SNE needs at least 4 points")
    perp = config.resolved_perplexity(n)
    P, achieved = joint_affinities(X, perp, config.perplexity_tol, config.search_steps)
    rng = np.random.default_rng(config.seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    stop_exag = config.iterations // 4
    trace: list[float] = []
    off = ~np.eye(n, dtype=bool)
    for it in range(config.iterations):
        exag = config.exaggeration if it < stop_exag else 1.0
        mom = config.momentum[0] if it < stop_exag else config.momentum[1]
        diff = Y[:, None, :] - Y[None, :, :]
        num = 1.0 / (1.0 + (diff * diff).sum(axis=2))
        num[~off] = 0.0
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (W[:, :, None] * diff).sum(axis=1)
        if not np.all(np.isfinite(grad)):
            raise TsneError(f"non-finite gradient at iteration {it}")
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - config.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        trace.append(_kl(P, Q))
    tags = list(labels) if labels is not None else [("", "")] * n
    return TsneResult(Y, trace, tags, stop_exag, achieved)


def silhouette(points: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    X = np.asarray(points, dtype=float)
    labels = list(labels)
    uniq = sorted(set(labels), key=str)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two labels")
    lab = np.array([uniq.index(l) for l in labels])
    counts = np.bincount(lab)
    if np.any(counts < 2):
        raise ValueError(f"label {uniq[int(np.argmin(counts))]!r} has fewer than 2 points")
    D = np.sqrt(_sq_distances(X))
    s = np.empty(len(X))
    for i in range(len(X)):
        a = D[i, lab == lab[i]].sum() / (counts[lab[i]] - 1)
        b = min(D[i, lab == k].mean() for k in range(len(uniq)) if k != lab[i])
        s[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return float(s.mean())
