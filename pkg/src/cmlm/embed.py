"""Skip-gram with negative sampling over token and n-gram units."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numba
import numpy as np

from .textpipe import JOINER, NGramInventory, Vocabulary

log = logging.getLogger(__name__)

_NEG_TABLE_SIZE = 1_000_000


@dataclass
class SgnsConfig:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    min_lr_frac: float = 1e-4
    subsample: float = 1e-3
    seed: int = 7
    workers: int = 1

    def validate(self):
        if self.dim < 8:
            raise ValueError("dim must be >= 8")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.window < 1 or self.epochs < 0:
            raise ValueError("window must be >= 1 and epochs >= 0")


@dataclass
class EmbeddingMatrix:
    units: list
    vectors: np.ndarray
    lang: str = ""

    def __post_init__(self):
        self.index = {u: i for i, u in enumerate(self.units)}

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.units)

    def __contains__(self, unit):
        return unit in self.index

    def row(self, unit):
        return self.vectors[self.index[unit]]

    def rows(self, units):
        return self.vectors[[self.index[u] for u in units]]

    def normalized(self):
        n = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        n[n == 0] = 1.0
        return EmbeddingMatrix(self.units, self.vectors / n, self.lang)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{len(self.units)} {self.dim}\n")
            for u, v in zip(self.units, self.vectors):
                f.write(u + " " + " ".join(f"{x:.6f}" for x in v) + "\n")

    @classmethod
    def load(cls, path, lang=""):
        with open(path, encoding="utf-8") as f:
            n, d = map(int, f.readline().split())
            units, vecs = [], np.empty((n, d))
            for i in range(n):
                parts = f.readline().rstrip("\n").split(" ")
                units.append(parts[0])
                vecs[i] = np.array(parts[1:], dtype=np.float64)
        return cls(units, vecs, lang)


def augment_corpus_with_ngrams(corpus, inventory: NGramInventory, vocab: Vocabulary):
    """Re-segment token-id sentences into inventory n-grams (leftmost-longest) and single tokens."""
    by_ids = inventory.by_ids
    orders = sorted({len(g) for g in by_ids if len(g) > 1}, reverse=True)
    out = []
    for sent in corpus:
        units, i, L = [], 0, len(sent)
        while i < L:
            for n in orders:
                if i + n <= L:
                    key = by_ids.get(tuple(sent[i : i + n]))
                    if key is not None:
                        units.append(key)
                        i += n
                        break
            else:
                units.append(vocab.tokens[sent[i]])
                i += 1
        out.append(units)
    return out


def unit_corpus(corpus, vocab: Vocabulary):
    """Token-id sentences as lists of token strings."""
    return [[vocab.tokens[t] for t in s] for s in corpus]


# -- the kernel -----------------------------------------------------------


@numba.njit(cache=True, fastmath=False)
def _sigmoid(x):
    if x > 30.0:
        return 1.0
    if x < -30.0:
        return 0.0
    return 1.0 / (1.0 + np.exp(-x))


@numba.njit(cache=True)
def _pair_update(syn0, syn1, center, target, label, alpha, neu1e):
    """One logistic term: accumulate the input-side step into neu1e, update syn1 in place.

    Returns the term's loss -log sigma(+-score).
    """
    d = syn0.shape[1]
    f = 0.0
    for k in range(d):
        f += syn0[center, k] * syn1[target, k]
    s = _sigmoid(f)
    g = (label - s) * alpha
    for k in range(d):
        neu1e[k] += g * syn1[target, k]
        syn1[target, k] += g * syn0[center, k]
    if label > 0.5:
        return -np.log(max(s, 1e-12))
    return -np.log(max(1.0 - s, 1e-12))


@numba.njit(cache=True)
def _train_shard(syn0, syn1, flat, offsets, s_lo, s_hi, neg_table, keep_prob, window, negatives,
                 alpha0, min_alpha, done0, total, seed, progress_scale):
    d = syn0.shape[1]
    rnd = np.uint64(seed)
    neu1e = np.zeros(d)
    buf = np.empty(offsets[-1] - offsets[0] + 1, dtype=np.int64)
    loss = 0.0
    npairs = 0
    done = done0
    for s in range(s_lo, s_hi):
        n = 0
        for p in range(offsets[s], offsets[s + 1]):
            w = flat[p]
            rnd = rnd * np.uint64(25214903917) + np.uint64(11)
            if keep_prob[w] < 1.0 and keep_prob[w] < ((rnd & np.uint64(0xFFFF)) / 65536.0):
                continue
            buf[n] = w
            n += 1
        done += (offsets[s + 1] - offsets[s]) * progress_scale
        alpha = alpha0 * max(min_alpha, 1.0 - done / (total + 1.0))
        for i in range(n):
            rnd = rnd * np.uint64(25214903917) + np.uint64(11)
            b = np.int64(rnd % np.uint64(window))
            for j in range(max(0, i - window + b), min(n, i + window - b + 1)):
                if j == i:
                    continue
                center = buf[j]
                for k in range(d):
                    neu1e[k] = 0.0
                loss += _pair_update(syn0, syn1, center, buf[i], 1.0, alpha, neu1e)
                for _ in range(negatives):
                    rnd = rnd * np.uint64(25214903917) + np.uint64(11)
                    t = neg_table[np.int64((rnd >> np.uint64(16)) % np.uint64(neg_table.shape[0]))]
                    if t == buf[i]:
                        continue
                    loss += _pair_update(syn0, syn1, center, t, 0.0, alpha, neu1e)
                for k in range(d):
                    syn0[center, k] += neu1e[k]
                npairs += 1
    return loss, npairs


@numba.njit(parallel=True, cache=True)
def _train_parallel(syn0, syn1, flat, offsets, bounds, neg_table, keep_prob, window, negatives,
                    alpha0, min_alpha, done0, total, seeds):
    nshard = bounds.shape[0] - 1
    losses = np.zeros(nshard)
    counts = np.zeros(nshard, dtype=np.int64)
    for sh in numba.prange(nshard):
        lo, hi = bounds[sh], bounds[sh + 1]
        # shards run concurrently, so each advances the decay at nshard x its own pace
        l, c = _train_shard(syn0, syn1, flat, offsets, lo, hi, neg_table, keep_prob, window, negatives,
                            alpha0, min_alpha, done0, total, seeds[sh], nshard)
        losses[sh] = l
        counts[sh] = c
    return losses, counts


def sgns_pair_loss(v_in, v_pos, v_negs):
    """Negative-sampling loss of one (center, context) pair with its negatives."""
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    return -np.log(sig(v_in @ v_pos)) - np.sum(np.log(sig(-(v_negs @ v_in))))


def sgns_pair_grad(v_in, v_pos, v_negs):
    """Analytic gradient of :func:`sgns_pair_loss` w.r.t. (v_in, v_pos, v_negs)."""
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    gp = sig(v_in @ v_pos) - 1.0
    gn = sig(v_negs @ v_in)
    g_in = gp * v_pos + gn @ v_negs
    return g_in, gp * v_in, gn[:, None] * v_in[None, :]


def _neg_table(counts):
    p = counts.astype(np.float64) ** 0.75
    p /= p.sum()
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, (np.arange(_NEG_TABLE_SIZE) + 0.5) / _NEG_TABLE_SIZE).astype(np.int64)


def train_sgns(corpus, cfg: SgnsConfig, lang="", return_losses=False):
    """Train unit vectors on a corpus of unit-string sentences; returns input-side vectors."""
    cfg.validate()
    counts = Counter(u for s in corpus for u in s)
    if not counts:
        raise ValueError("train_sgns needs a non-empty corpus")
    units = sorted(counts, key=lambda u: (-counts[u], u))
    index = {u: i for i, u in enumerate(units)}
    freq = np.array([counts[u] for u in units], dtype=np.int64)
    total = int(freq.sum())
    lens = np.array([len(s) for s in corpus], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    flat = np.fromiter((index[u] for s in corpus for u in s), dtype=np.int64, count=total)
    thr = cfg.subsample * total
    keep = (np.sqrt(freq / thr) + 1.0) * thr / freq if cfg.subsample > 0 else np.ones(len(units))
    neg = _neg_table(freq)

    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    syn0 = (rng.random((len(units), d)) - 0.5) / d
    syn1 = np.zeros((len(units), d))

    nsent = len(corpus)
    nshard = max(1, cfg.workers)
    bounds = np.linspace(0, nsent, nshard + 1).astype(np.int64)
    epoch_losses = []
    for ep in range(cfg.epochs):
        seeds = np.array([(cfg.seed * 1_000_003 + ep * 7919 + sh * 104_729 + 1) & 0xFFFFFFFFFFFF
                          for sh in range(nshard)], dtype=np.uint64)
        done0 = ep * total
        if nshard == 1:
            loss, npairs = _train_shard(syn0, syn1, flat, offsets, 0, nsent, neg, keep, cfg.window,
                                        cfg.negatives, cfg.lr, cfg.min_lr_frac, done0,
                                        cfg.epochs * total, seeds[0], 1)
        else:
            ls, cs = _train_parallel(syn0, syn1, flat, offsets, bounds, neg, keep, cfg.window,
                                     cfg.negatives, cfg.lr, cfg.min_lr_frac, done0,
                                     cfg.epochs * total, seeds)
            loss, npairs = ls.sum(), cs.sum()
        epoch_losses.append(loss / max(npairs, 1))
        log.info("sgns[%s] epoch %d loss %.4f", lang, ep, epoch_losses[-1])
    if not np.all(np.isfinite(syn0)):
        raise FloatingPointError("SGNS produced non-finite vectors")
    emb = EmbeddingMatrix(units, syn0, lang)
    return (emb, epoch_losses) if return_losses else emb


def is_ngram_unit(unit: str) -> bool:
    return JOINER in unit
