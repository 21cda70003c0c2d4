"""Synthetic cipher language pairs, shared BPE and n-gram inventories."""
from __future__ import annotations

import heapq
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

JOINER = "▁"
CONT = "@@"
SPECIALS = ("<pad>", "<unk>", "<mask>", "<s>", "</s>")
PAD, UNK, MASK, BOS, EOS = range(len(SPECIALS))
LANGS = ("x", "y")

_BASE_CONS = "bcdfghjklmnprstvwz"
_BASE_VOW = "aeiou"
_CIPH_CONS = "βγδζθκλμνξπρστφχψ"
_CIPH_VOW = "αεηιοω"


class ConfigError(ValueError):
    pass


def default_anchor_tokens(n=64):
    """Digits, punctuation, then two-digit numerals, up to ``n`` items."""
    toks = [str(d) for d in range(10)] + list(",.;:!?()-%")
    toks += [str(v) for v in range(10, 100)]
    return toks[:n]


@dataclass
class CipherSpec:
    base_vocab_size: int = 1000
    zipf_exponent: float = 1.0
    markov_order: int = 1
    swap_prob: float = 0.1
    shared_anchor_tokens: list = field(default_factory=default_anchor_tokens)
    seed: int = 1234
    num_sentences: int = 20000
    sentence_length_range: tuple = (6, 16)
    num_eval_sentences: int = 200
    successors: int = 16
    background: float = 0.2

    def validate(self):
        lo, hi = self.sentence_length_range
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ConfigError(f"swap_prob must lie in [0, 1], got {self.swap_prob}")
        if self.base_vocab_size < 2:
            raise ConfigError("base_vocab_size must be >= 2")
        if lo < 1 or lo > hi:
            raise ConfigError(f"bad sentence_length_range {self.sentence_length_range}")
        if self.markov_order < 1:
            raise ConfigError("markov_order must be >= 1")
        if len(self.shared_anchor_tokens) >= self.base_vocab_size:
            raise ConfigError("more anchor tokens than base vocabulary entries")
        if len(set(self.shared_anchor_tokens)) != len(self.shared_anchor_tokens):
            raise ConfigError("duplicate anchor tokens")
        if self.num_sentences < 0 or self.num_eval_sentences < 0:
            raise ConfigError("sentence counts must be non-negative")
        if not 0.0 <= self.background <= 1.0 or self.successors < 1:
            raise ConfigError("background must be in [0, 1] and successors >= 1")


@dataclass
class GoldLexicon:
    mapping: dict
    anchors: frozenset

    def __post_init__(self):
        self.inverse = {v: k for k, v in self.mapping.items()}
        if len(self.inverse) != len(self.mapping):
            raise ValueError("gold lexicon is not a bijection")

    def encipher(self, sentence):
        return [self.mapping[w] for w in sentence]

    def decipher(self, sentence):
        return [self.inverse[w] for w in sentence]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for k, v in self.mapping.items():
                f.write(f"{k}\t{v}\n")

    @classmethod
    def load(cls, path):
        mapping = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                k, v = line.rstrip("\n").split("\t")
                mapping[k] = v
        return cls(mapping, frozenset(k for k, v in mapping.items() if k == v))


@dataclass
class EvalPair:
    x: list
    y: list
    links: list  # 1-indexed (i, j)


@dataclass
class CipherCorpus:
    corpus_x: list
    corpus_y: list
    gold: GoldLexicon
    parallel_eval: list
    base_words: list


def _make_words(n, cons, vow, rng, taken=()):
    words, seen = [], set(taken)
    while len(words) < n:
        rank = len(words)
        nsyl = 1 + min(3, int(rng.integers(0, 2) + np.log10(rank + 2)))
        w = "".join(cons[rng.integers(len(cons))] + vow[rng.integers(len(vow))] for _ in range(nsyl))
        if rng.random() < 0.3:
            w += cons[rng.integers(len(cons))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class _MarkovSource:
    """Zipf background mixed with sparse per-word successor lists, one table per lag.

    Successor slots are drawn from the Zipf law with replacement so the
    stationary distribution stays close to Zipf.
    """

    def __init__(self, spec, rng):
        V = spec.base_vocab_size
        z = (np.arange(1, V + 1, dtype=np.float64)) ** (-spec.zipf_exponent)
        self.z = z / z.sum()
        self.cdf = np.cumsum(self.z)
        self.cdf[-1] = 1.0
        self.tables = [self._draw(rng, V, spec.successors) for _ in range(spec.markov_order)]
        self.background = spec.background
        self.spec = spec

    def _draw(self, rng, V, k):
        return np.searchsorted(self.cdf, rng.random((V, k)), side="right").clip(0, V - 1)

    def sample(self, n, rng):
        lo, hi = self.spec.sentence_length_range
        lengths = rng.integers(lo, hi + 1, size=n)
        T = int(lengths.max()) if n else 0
        out = np.zeros((n, T), dtype=np.int64)
        K = len(self.tables)
        V = len(self.z)
        for t in range(T):
            bg = np.searchsorted(self.cdf, rng.random(n), side="right").clip(0, V - 1)
            if t == 0:
                out[:, 0] = bg
                continue
            lag = rng.integers(1, min(t, K) + 1, size=n)
            slot = rng.integers(0, self.tables[0].shape[1], size=n)
            prev = out[np.arange(n), t - lag]
            sparse = np.empty(n, dtype=np.int64)
            for k in range(1, K + 1):
                sel = lag == k
                sparse[sel] = self.tables[k - 1][prev[sel], slot[sel]]
            use_bg = rng.random(n) < self.background
            out[:, t] = np.where(use_bg, bg, sparse)
        return [out[i, : lengths[i]].tolist() for i in range(n)]


def _swap(n, p, rng):
    """Permutation from non-overlapping adjacent swaps; perm[j] = source index at position j."""
    perm = list(range(n))
    i = 0
    while i < n - 1:
        if rng.random() < p:
            perm[i], perm[i + 1] = perm[i + 1], perm[i]
            i += 2
        else:
            i += 1
    return perm


def gen_cipher_corpus(spec: CipherSpec) -> CipherCorpus:
    spec.validate()
    ss = np.random.SeedSequence(spec.seed)
    r_words, r_chain, r_x, r_y, r_eval, r_swap = (np.random.default_rng(s) for s in ss.spawn(6))
    V = spec.base_vocab_size
    anchors = list(spec.shared_anchor_tokens)
    n_plain = V - len(anchors)
    base_plain = _make_words(n_plain, _BASE_CONS, _BASE_VOW, r_words, taken=anchors)
    ciph_plain = _make_words(n_plain, _CIPH_CONS, _CIPH_VOW, r_words, taken=anchors)
    # anchors sit at spread-out ranks among the frequent part of the vocabulary
    span = min(V, 8 * len(anchors))
    anchor_ranks = set(r_words.choice(span, size=len(anchors), replace=False).tolist()) if anchors else set()
    base_words, ciph_words = [], []
    ai = pi = 0
    for r in range(V):
        if r in anchor_ranks:
            base_words.append(anchors[ai])
            ciph_words.append(anchors[ai])
            ai += 1
        else:
            base_words.append(base_plain[pi])
            ciph_words.append(ciph_plain[pi])
            pi += 1
    gold = GoldLexicon(dict(zip(base_words, ciph_words)), frozenset(anchors))
    src = _MarkovSource(spec, r_chain)

    corpus_x = [[base_words[i] for i in s] for s in src.sample(spec.num_sentences, r_x)]
    corpus_y = []
    for s in src.sample(spec.num_sentences, r_y):
        perm = _swap(len(s), spec.swap_prob, r_swap)
        corpus_y.append([ciph_words[s[p]] for p in perm])
    evals = []
    for s in src.sample(spec.num_eval_sentences, r_eval):
        perm = _swap(len(s), spec.swap_prob, r_swap)
        x = [base_words[i] for i in s]
        y = [ciph_words[s[p]] for p in perm]
        links = sorted((perm[j] + 1, j + 1) for j in range(len(s)))
        evals.append(EvalPair(x, y, links))
    return CipherCorpus(corpus_x, corpus_y, gold, evals, base_words)


# -- BPE ------------------------------------------------------------------


@dataclass
class MergeTable:
    merges: list  # [(left, right)] in learning order

    def __post_init__(self):
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache = {}

    def __len__(self):
        return len(self.merges)

    def segment(self, word):
        """Split ``word`` into subword strings, continuation marker on all but the last."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = list(word)
        while len(syms) > 1:
            best, best_rank = None, None
            for i in range(len(syms) - 1):
                r = self.ranks.get((syms[i], syms[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = (syms[best], syms[best + 1])
            merged, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == pair:
                    merged.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        out = [s + CONT for s in syms[:-1]] + syms[-1:]
        self._cache[word] = out
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([tuple(line.rstrip("\n").split(" ")) for line in f if line.strip()])


def learn_bpe(corpora, num_merges: int) -> MergeTable:
    """Greedy pair-merge learning over word counts of all corpora together.

    Ties between equally frequent pairs go to the lexicographically smallest pair.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    counts = Counter(w for corpus in corpora for sent in corpus for w in sent)
    if not counts:
        raise ValueError("learn_bpe needs a non-empty corpus")
    words = [list(w) for w in sorted(counts)]
    freqs = [counts[w] for w in sorted(counts)]
    pair_counts = Counter()
    where = defaultdict(set)
    for wi, syms in enumerate(words):
        for a, b in zip(syms, syms[1:]):
            pair_counts[a, b] += freqs[wi]
            where[a, b].add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    merges = []
    while len(merges) < num_merges and heap:
        negc, pair = heapq.heappop(heap)
        cur = pair_counts.get(pair, 0)
        if cur <= 0:
            continue
        if -negc != cur:
            heapq.heappush(heap, (-cur, pair))
            continue
        merges.append(pair)
        a, b = pair
        touched = set()
        for wi in list(where[pair]):
            syms = words[wi]
            f = freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= f
                touched.add(p)
            new, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and syms[i] == a and syms[i + 1] == b:
                    new.append(a + b)
                    i += 2
                else:
                    new.append(syms[i])
                    i += 1
            words[wi] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where[p].add(wi)
                touched.add(p)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
                where.pop(p, None)
        pair_counts.pop(pair, None)
        where.pop(pair, None)
    return MergeTable(merges)


@dataclass
class Vocabulary:
    tokens: list
    freqs: list

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id(self, tok):
        return self.index.get(tok, UNK)

    def lookup(self, ids):
        return [self.tokens[i] for i in ids]

    @classmethod
    def build(cls, token_counts: Counter):
        body = sorted(token_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(list(SPECIALS) + [t for t, _ in body], [0] * len(SPECIALS) + [c for _, c in body])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t, c in zip(self.tokens[len(SPECIALS):], self.freqs[len(SPECIALS):]):
                f.write(f"{t}\t{c}\n")

    @classmethod
    def load(cls, path):
        toks, fr = list(SPECIALS), [0] * len(SPECIALS)
        with open(path, encoding="utf-8") as f:
            for line in f:
                t, c = line.rstrip("\n").split("\t")
                toks.append(t)
                fr.append(int(c))
        return cls(toks, fr)

    def digest(self):
        import hashlib

        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]


def build_vocab(corpora, merges: MergeTable) -> Vocabulary:
    counts = Counter()
    for corpus in corpora:
        for sent in corpus:
            for w in sent:
                counts.update(merges.segment(w))
    return Vocabulary.build(counts)


@dataclass
class Encoded:
    ids: list
    word_index: list  # source word position of each token


def apply_bpe(sentence, merges: MergeTable, vocab: Vocabulary) -> Encoded:
    ids, widx = [], []
    for wi, w in enumerate(sentence):
        for t in merges.segment(w):
            ids.append(vocab.id(t))
            widx.append(wi)
    return Encoded(ids, widx)


def tokenize_corpus(corpus, merges, vocab):
    return [apply_bpe(s, merges, vocab).ids for s in corpus]


def detokenize(tokens):
    """Join sub-tokens back into words by stripping continuation markers."""
    words, cur = [], ""
    for t in tokens:
        if t.endswith(CONT):
            cur += t[: -len(CONT)]
        else:
            words.append(cur + t)
            cur = ""
    if cur:
        words.append(cur)
    return words


# -- n-gram inventories ---------------------------------------------------


@dataclass(frozen=True)
class NGram:
    ids: tuple
    lang: str
    freq: int


@dataclass
class NGramInventory:
    lang: str
    n_max: int
    min_count: int
    top_m: int
    entries: dict  # key -> NGram

    def __post_init__(self):
        self.by_ids = {g.ids: k for k, g in self.entries.items()}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def keys(self):
        return list(self.entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# lang={self.lang} n_max={self.n_max} min_count={self.min_count} top_m={self.top_m}\n")
            for key, g in self.entries.items():
                f.write(f"{key}\t{g.freq}\n")

    @classmethod
    def load(cls, path, vocab: Vocabulary):
        with open(path, encoding="utf-8") as f:
            head = dict(kv.split("=", 1) for kv in f.readline()[1:].split())
            entries = {}
            for line in f:
                key, freq = line.rstrip("\n").split("\t")
                ids = tuple(vocab.id(t) for t in key.split(JOINER))
                entries[key] = NGram(ids, head["lang"], int(freq))
        return cls(head["lang"], int(head["n_max"]), int(head["min_count"]), int(head["top_m"]), entries)


def ngram_key(ids, vocab: Vocabulary) -> str:
    return JOINER.join(vocab.tokens[i] for i in ids)


def extract_ngrams(corpus, vocab: Vocabulary, n_max=3, min_count=5, top_m=2000, lang="x") -> NGramInventory:
    """Frequent token n-grams of orders 1..n_max, never spanning sentences."""
    per_order = [Counter() for _ in range(n_max + 1)]
    for sent in corpus:
        L = len(sent)
        for n in range(1, n_max + 1):
            c = per_order[n]
            for i in range(L - n + 1):
                g = tuple(sent[i : i + n])
                c[g] += 1
    entries = {}
    for n in range(1, n_max + 1):
        kept = []
        for g, c in per_order[n].items():
            if c >= min_count and UNK not in g and all(t >= len(SPECIALS) for t in g):
                kept.append((ngram_key(g, vocab), g, c))
        kept.sort(key=lambda e: (-e[2], e[0]))
        for key, g, c in kept[:top_m]:
            entries[key] = NGram(g, lang, c)
    return NGramInventory(lang, n_max, min_count, top_m, entries)


# -- corpus files ---------------------------------------------------------


def write_corpus(path, corpus):
    with open(path, "w", encoding="utf-8") as f:
        for s in corpus:
            f.write(" ".join(map(str, s)) + "\n")


def read_corpus(path):
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f]


def write_alignments(path, link_sets):
    with open(path, "w", encoding="utf-8") as f:
        for links in link_sets:
            f.write(" ".join(f"{i}-{j}" for i, j in sorted(links)) + "\n")


def read_alignments(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            out.append([tuple(int(v) for v in p.split("-")) for p in line.split()])
    return out


def save_cipher_corpus(cc: CipherCorpus, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_corpus(outdir / "train.x", cc.corpus_x)
    write_corpus(outdir / "train.y", cc.corpus_y)
    write_corpus(outdir / "eval.x", [p.x for p in cc.parallel_eval])
    write_corpus(outdir / "eval.y", [p.y for p in cc.parallel_eval])
    write_alignments(outdir / "eval.gold", [p.links for p in cc.parallel_eval])
    cc.gold.save(outdir / "lexicon.tsv")
    return outdir


def load_cipher_corpus(indir) -> CipherCorpus:
    indir = Path(indir)
    gold = GoldLexicon.load(indir / "lexicon.tsv")
    ex, ey = read_corpus(indir / "eval.x"), read_corpus(indir / "eval.y")
    links = read_alignments(indir / "eval.gold")
    evals = [EvalPair(a, b, l) for a, b, l in zip(ex, ey, links)]
    return CipherCorpus(read_corpus(indir / "train.x"), read_corpus(indir / "train.y"), gold, evals,
                        list(gold.mapping))
