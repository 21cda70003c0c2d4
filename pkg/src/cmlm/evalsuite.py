"""Word alignment from encoder states, AER, and translation-table precision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import encode
from .textpipe import BOS, EOS, JOINER, UNK, GoldLexicon, MergeTable, Vocabulary, apply_bpe, detokenize


@dataclass
class AerReport:
    precision: float
    recall: float
    f: float
    aer: float
    n_pred: int = 0
    n_gold: int = 0
    n_hit: int = 0

    def format(self):
        return (f"P={self.precision:.4f} R={self.recall:.4f} F={self.f:.4f} AER={self.aer:.4f} "
                f"(|A|={self.n_pred} |S|={self.n_gold} |A&S|={self.n_hit})")


def _report(hit, na, ns):
    p = hit / na if na else 0.0
    r = hit / ns if ns else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    aer = 1.0 - 2 * hit / (na + ns) if na + ns else 1.0
    return AerReport(p, r, f, aer, na, ns, hit)


def aer_metrics(pred, gold) -> AerReport:
    """P/R/F/AER of predicted links against sure-only gold links."""
    A, S = set(map(tuple, pred)), set(map(tuple, gold))
    return _report(len(A & S), len(A), len(S))


def corpus_aer(preds, golds) -> AerReport:
    hit = na = ns = 0
    for a, s in zip(preds, golds):
        A, S = set(map(tuple, a)), set(map(tuple, s))
        hit += len(A & S)
        na += len(A)
        ns += len(S)
    return _report(hit, na, ns)


@dataclass
class SentenceView:
    words: list
    ids: list
    word_index: list
    retained: list  # word positions that are a single in-vocabulary token


def sentence_view(words, merges: MergeTable, vocab: Vocabulary) -> SentenceView:
    enc = apply_bpe(words, merges, vocab)
    count = np.bincount(enc.word_index, minlength=len(words)) if words else np.zeros(0, int)
    retained = [w for w in range(len(words))
                if count[w] == 1 and enc.ids[enc.word_index.index(w)] != UNK]
    return SentenceView(words, enc.ids, enc.word_index, retained)


def _normalize(m):
    n = np.linalg.norm(m, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return m / n


def argmax_links(vx, vy, keep_x, keep_y):
    """For each kept source word, the kept target word of highest cosine (1-indexed links)."""
    if not keep_x or not keep_y:
        return set()
    sims = _normalize(vx[keep_x]) @ _normalize(vy[keep_y]).T
    best = sims.argmax(axis=1)
    return {(keep_x[i] + 1, keep_y[int(j)] + 1) for i, j in enumerate(best)}


def word_states(state, view: SentenceView, lang: int):
    """Mean-pooled top-layer states per word, BOS/EOS around the sentence."""
    ids = [BOS] + view.ids + [EOS]
    h = encode(state, np.asarray(ids)[None, :], lang, train=False).data[0, 1:-1].astype(np.float64)
    out = np.zeros((len(view.words), h.shape[1]))
    cnt = np.zeros(len(view.words))
    for t, w in enumerate(view.word_index):
        out[w] += h[t]
        cnt[w] += 1
    return out / np.maximum(cnt, 1)[:, None]


def align_words(state, sent_x, sent_y, merges, vocab, lang_x=0, lang_y=1, return_views=False):
    vx, vy = sentence_view(sent_x, merges, vocab), sentence_view(sent_y, merges, vocab)
    if not sent_x or not sent_y:
        return (set(), vx, vy) if return_views else set()
    links = argmax_links(word_states(state, vx, lang_x), word_states(state, vy, lang_y), vx.retained, vy.retained)
    return (links, vx, vy) if return_views else links


def align_words_static(sent_x, sent_y, merges, vocab, static, lang_x="x", lang_y="y", return_views=False):
    """Context-unaware baseline: cosine of mapped static token vectors."""
    vx, vy = sentence_view(sent_x, merges, vocab), sentence_view(sent_y, merges, vocab)
    if not sent_x or not sent_y:
        return (set(), vx, vy) if return_views else set()
    ex = np.zeros((len(sent_x), static.by_lang[lang_x].shape[1]))
    ey = np.zeros((len(sent_y), static.by_lang[lang_y].shape[1]))
    for w in vx.retained:
        ex[w] = static.rows(lang_x, [vx.ids[vx.word_index.index(w)]])[0]
    for w in vy.retained:
        ey[w] = static.rows(lang_y, [vy.ids[vy.word_index.index(w)]])[0]
    links = argmax_links(ex, ey, vx.retained, vy.retained)
    return (links, vx, vy) if return_views else links


def restrict_gold(links, vx: SentenceView, vy: SentenceView):
    kx, ky = set(w + 1 for w in vx.retained), set(w + 1 for w in vy.retained)
    return {(i, j) for i, j in links if i in kx and j in ky}


def evaluate_alignment(pairs, aligner) -> AerReport:
    """Corpus-level AER; ``aligner(x, y)`` returns (links, view_x, view_y)."""
    preds, golds = [], []
    for p in pairs:
        links, vx, vy = aligner(p.x, p.y)
        preds.append(links)
        golds.append(restrict_gold(p.links, vx, vy))
    return corpus_aer(preds, golds)


def _key_words(key):
    toks = key.split(JOINER)
    if toks[-1].endswith("@@"):
        return None
    return detokenize(toks)


@dataclass
class TableScore:
    per_order: dict  # order -> (precision, n_sources)
    precision: float
    n_sources: int

    @property
    def empty(self):
        return self.n_sources == 0


def table_precision(table, gold: GoldLexicon, at_k=1, reverse=False) -> TableScore:
    """Fraction of sources whose top ``at_k`` candidates contain the gold translation, per n-gram order.

    Only sources made of whole gold-lexicon words are scored. A table with
    nothing to score gives precision 0 over 0 sources and ``empty`` set.
    """
    mapping = gold.inverse if reverse else gold.mapping
    hits, counts = {}, {}
    for src, cands in table.entries.items():
        words = _key_words(src)
        if not words or any(w not in mapping for w in words):
            continue
        want = [mapping[w] for w in words]
        order = src.count(JOINER) + 1
        counts[order] = counts.get(order, 0) + 1
        if any(_key_words(e.tgt) == want for e in cands[:at_k]):
            hits[order] = hits.get(order, 0) + 1
    per = {o: (hits.get(o, 0) / n, n) for o, n in sorted(counts.items())}
    n = sum(counts.values())
    return TableScore(per, sum(hits.values()) / n if n else 0.0, n)
