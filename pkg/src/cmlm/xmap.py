"""Orthogonal mapping between embedding spaces, margin scoring and table inference."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .embed import EmbeddingMatrix
from .textpipe import JOINER, NGramInventory

log = logging.getLogger(__name__)


class EmptyDictionaryError(RuntimeError):
    pass


def normalize_rows(m):
    n = np.linalg.norm(m, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return m / n


def preprocess(emb: EmbeddingMatrix) -> EmbeddingMatrix:
    """Unit length, mean centring, unit length again."""
    v = normalize_rows(emb.vectors)
    v = v - v.mean(axis=0, keepdims=True)
    return EmbeddingMatrix(emb.units, normalize_rows(v), emb.lang)


@dataclass
class MappingMatrix:
    W: np.ndarray

    def apply(self, m):
        return m @ self.W

    def orthogonality_error(self):
        d = self.W.shape[0]
        return float(np.abs(self.W.T @ self.W - np.eye(d)).max())

    def save(self, path):
        d = self.W.shape[0]
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{d}\n")
            for row in self.W:
                f.write(" ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            d = int(f.readline())
            W = np.array([[float(x) for x in f.readline().split()] for _ in range(d)])
        return cls(W)


def procrustes(src, tgt, pairs) -> MappingMatrix:
    """Orthogonal W minimising ||src[i] W - tgt[j]|| over dictionary pairs (row-vector convention)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    X = src[pairs[:, 0]]
    Z = tgt[pairs[:, 1]]
    d = src.shape[1]
    u, s, vt = np.linalg.svd(Z.T @ X)
    if len(pairs) < d or s[-1] < 1e-10 * max(s[0], 1e-300):
        warnings.warn(f"procrustes: cross-covariance is rank deficient ({len(pairs)} pairs, d={d})",
                      RuntimeWarning, stacklevel=2)
    return MappingMatrix(vt.T @ u.T)


def _topk_mean(sims, k, axis):
    k = min(k, sims.shape[axis])
    part = -np.partition(-sims, k - 1, axis=axis)
    return np.take(part, np.arange(k), axis=axis).mean(axis=axis)


def csls(xs, zs, k=10):
    """CSLS score matrix between row-normalised mapped sources and targets."""
    sims = xs @ zs.T
    rx = _topk_mean(sims, k, axis=1)
    rz = _topk_mean(sims, k, axis=0)
    return 2 * sims - rx[:, None] - rz[None, :]


def _mutual_nn(xs, zs, k):
    scores = csls(xs, zs, k)
    fwd = scores.argmax(axis=1)
    bwd = scores.argmax(axis=0)
    return [(i, int(j)) for i, j in enumerate(fwd) if bwd[j] == i]


def anchor_pairs(src: EmbeddingMatrix, tgt: EmbeddingMatrix, anchors):
    return [(src.index[a], tgt.index[a]) for a in anchors if a in src.index and a in tgt.index]


def self_learning(src: EmbeddingMatrix, tgt: EmbeddingMatrix, init, rounds=10, top_f=2000, csls_k=10,
                  return_dictionary=False):
    """Alternate Procrustes and mutual-CSLS dictionary induction over the top_f frequent units.

    ``src`` and ``tgt`` rows are assumed sorted by descending frequency and
    already preprocessed.
    """
    if not init:
        raise EmptyDictionaryError("self_learning needs a non-empty seed dictionary")
    dic = sorted(set(map(tuple, init)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        W = procrustes(src.vectors, tgt.vectors, dic)
    fs, ft = min(top_f, len(src)), min(top_f, len(tgt))
    for r in range(rounds):
        xs = normalize_rows(W.apply(src.vectors[:fs]))
        new = sorted(_mutual_nn(xs, tgt.vectors[:ft], csls_k))
        if not new:
            raise EmptyDictionaryError(f"self_learning: round {r} induced an empty dictionary")
        if new == dic:
            log.info("self_learning converged after %d rounds (%d pairs)", r, len(new))
            break
        dic = new
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            W = procrustes(src.vectors, tgt.vectors, dic)
        log.info("self_learning round %d: %d pairs", r, len(dic))
    return (W, dic) if return_dictionary else W


# -- margin scoring -------------------------------------------------------


@dataclass
class ScorerConfig:
    n: int = 5
    margin: str = "ratio"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("neighbourhood size must be >= 1")
        if self.margin != "ratio":
            raise ValueError(f"unknown margin function {self.margin!r}")


def cosine_matrix(A, B, chunk=16):
    """Cosines between rows of two normalised matrices, reduced in a fixed order.

    Every entry equals ``np.sum(a * b)`` for the corresponding row pair, so
    scores can be recomputed one pair at a time and compared bit for bit.
    """
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(0, A.shape[0], chunk):
        out[i : i + chunk] = np.sum(A[i : i + chunk, None, :] * B[None, :, :], axis=-1)
    return out


def neighbourhood_penalty(cos_row, n):
    """Sum of the n largest cosines divided by 2n, summed largest first."""
    top = np.sort(cos_row)[::-1][:n]
    acc = 0.0
    for c in top:
        acc += c / (2 * n)
    return acc


def margin(a, b):
    return a / b


def margin_sim(x, y, src_vecs: dict, tgt_vecs: dict, cfg: ScorerConfig = ScorerConfig()):
    """Margin score of one pair; neighbourhoods range over the opposite-language units.

    ``src_vecs``/``tgt_vecs`` map unit keys to mapped, normalised vectors.
    """
    ex, ey = src_vecs[x], tgt_vecs[y]
    if not np.any(ex) or not np.any(ey):
        warnings.warn(f"margin_sim: zero vector for {x!r} or {y!r}", RuntimeWarning, stacklevel=2)
        return 0.0
    T = np.stack(list(tgt_vecs.values()))
    S = np.stack(list(src_vecs.values()))
    px = neighbourhood_penalty(np.sum(ex[None, :] * T, axis=-1), cfg.n)
    py = neighbourhood_penalty(np.sum(ey[None, :] * S, axis=-1), cfg.n)
    return float(margin(np.sum(ex * ey), px + py))


@dataclass(frozen=True)
class TableEntry:
    src: str
    tgt: str
    sim: float
    weight: float


@dataclass
class TranslationTable:
    direction: str
    k: int
    entries: dict  # src key -> [TableEntry] in rank order

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def get(self, key):
        return self.entries.get(key)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# direction={self.direction} k={self.k}\n")
            for src, cands in self.entries.items():
                for e in cands:
                    f.write(f"{e.src}\t{e.tgt}\t{e.sim!r}\t{e.weight!r}\n")

    @classmethod
    def load(cls, path):
        entries, direction, k = {}, "", 0
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.startswith("#"):
                    meta = dict(kv.split("=") for kv in line[1:].split())
                    direction, k = meta.get("direction", ""), int(meta.get("k", 0))
                    continue
                s, t, sim, w = line.rstrip("\n").split("\t")
                if not t:
                    raise ValueError(f"empty candidate for {s!r}")
                entries.setdefault(s, []).append(TableEntry(s, t, float(sim), float(w)))
        return cls(direction, k or max((len(v) for v in entries.values()), default=0), entries)


def _weights(sims):
    w = np.clip(np.asarray(sims, dtype=np.float64), 0.0, None)
    tot = w.sum()
    return w / tot if tot > 0 else None


def mapped_vectors(keys, emb: EmbeddingMatrix, W: MappingMatrix | None):
    vecs = emb.rows(keys)
    if W is not None:
        vecs = W.apply(vecs)
    return normalize_rows(vecs)


def infer_table(inv_src: NGramInventory, inv_tgt: NGramInventory, src_emb: EmbeddingMatrix,
                tgt_emb: EmbeddingMatrix, k=5, cfg: ScorerConfig = ScorerConfig(), W_src=None, W_tgt=None,
                direction=None) -> TranslationTable:
    """Top-k margin-scored target n-grams for every source n-gram with an embedding."""
    skeys = [u for u in inv_src.keys() if u in src_emb]
    tkeys = [u for u in inv_tgt.keys() if u in tgt_emb]
    if not skeys or not tkeys:
        raise ValueError("infer_table: empty inventory after embedding lookup")
    Xs = mapped_vectors(skeys, src_emb, W_src)
    Yt = mapped_vectors(tkeys, tgt_emb, W_tgt)
    cos = cosine_matrix(Xs, Yt)
    px = np.array([neighbourhood_penalty(r, cfg.n) for r in cos])
    py = np.array([neighbourhood_penalty(c, cfg.n) for c in cos.T])
    kk = min(k, len(tkeys))
    entries, dropped = {}, 0
    for i, s in enumerate(skeys):
        sims = margin(cos[i], px[i] + py)
        order = np.lexsort((np.arange(len(tkeys)), -sims))[:kk]
        w = _weights(sims[order])
        if w is None:
            dropped += 1
            continue
        entries[s] = [TableEntry(s, tkeys[j], float(sims[j]), float(wj)) for j, wj in zip(order, w)]
    if dropped:
        log.warning("infer_table: dropped %d sources whose candidate scores were all <= 0", dropped)
    return TranslationTable(direction or f"{inv_src.lang}->{inv_tgt.lang}", kk, entries)


def ngram_order(key: str) -> int:
    return key.count(JOINER) + 1
