"""End-to-end wiring of the stages, shared by the CLI, the demos and the acceptance tests."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .embed import EmbeddingMatrix, SgnsConfig, augment_corpus_with_ngrams, train_sgns, unit_corpus
from .objective import CandidateIndex, CmlmConfig, StaticVectors
from .textpipe import (CipherCorpus, CipherSpec, MergeTable, NGramInventory, Vocabulary, build_vocab,
                       extract_ngrams, gen_cipher_corpus, learn_bpe, tokenize_corpus)
from .trainloop import TrainingData, split_valid
from .xmap import (MappingMatrix, ScorerConfig, TranslationTable, anchor_pairs, infer_table, normalize_rows,
                   preprocess, self_learning)

log = logging.getLogger(__name__)

# the frozen cipher fixture used for regression bounds
FIXTURE_SPEC = CipherSpec(num_sentences=20000)
FIXTURE_MERGES = 4000


@dataclass
class TextArtifacts:
    cipher: CipherCorpus
    merges: MergeTable
    vocab: Vocabulary
    tokens: dict  # "x"/"y" -> token-id sentences
    inventories: dict  # "x"/"y" -> NGramInventory


def build_text(spec: CipherSpec, num_merges=4000, n_max=3, min_count=5, top_m=2000, cipher=None) -> TextArtifacts:
    cc = cipher if cipher is not None else gen_cipher_corpus(spec)
    merges = learn_bpe([cc.corpus_x, cc.corpus_y], num_merges)
    vocab = build_vocab([cc.corpus_x, cc.corpus_y], merges)
    tokens = {"x": tokenize_corpus(cc.corpus_x, merges, vocab), "y": tokenize_corpus(cc.corpus_y, merges, vocab)}
    invs = {l: extract_ngrams(tokens[l], vocab, n_max, min_count, top_m, lang=l) for l in tokens}
    return TextArtifacts(cc, merges, vocab, tokens, invs)


def embedding_corpus(tokens, inventory: NGramInventory, vocab: Vocabulary):
    """Plain token sentences followed by their n-gram re-segmentation."""
    return unit_corpus(tokens, vocab) + augment_corpus_with_ngrams(tokens, inventory, vocab)


def build_embeddings(text: TextArtifacts, cfg: SgnsConfig = SgnsConfig()) -> dict:
    return {l: train_sgns(embedding_corpus(text.tokens[l], text.inventories[l], text.vocab), cfg, lang=l)
            for l in ("x", "y")}


@dataclass
class MapArtifacts:
    W: MappingMatrix
    src: EmbeddingMatrix  # preprocessed x
    tgt: EmbeddingMatrix  # preprocessed y
    dictionary: list


def build_mapping(text: TextArtifacts, embs: dict, rounds=20, top_f=2000, csls_k=10) -> MapArtifacts:
    px, py = preprocess(embs["x"]), preprocess(embs["y"])
    seed = anchor_pairs(px, py, text.cipher.gold.anchors)
    W, dic = self_learning(px, py, seed, rounds=rounds, top_f=top_f, csls_k=csls_k, return_dictionary=True)
    return MapArtifacts(W, px, py, dic)


def build_tables(text: TextArtifacts, m: MapArtifacts, k=5, scorer=ScorerConfig()) -> dict:
    xy = infer_table(text.inventories["x"], text.inventories["y"], m.src, m.tgt, k=k, cfg=scorer, W_src=m.W,
                     direction="x->y")
    yx = infer_table(text.inventories["y"], text.inventories["x"], m.tgt, m.src, k=k, cfg=scorer, W_tgt=m.W,
                     direction="y->x")
    return {"x": xy, "y": yx}


def build_static(vocab: Vocabulary, m: MapArtifacts) -> StaticVectors:
    d = m.src.dim
    out = {}
    for lang, emb, W in (("x", m.src, m.W), ("y", m.tgt, None)):
        rows = np.zeros((len(vocab), d))
        for i, tok in enumerate(vocab.tokens):
            if tok in emb.index:
                rows[i] = emb.vectors[emb.index[tok]]
        if W is not None:
            rows = W.apply(rows)
        out[lang] = normalize_rows(rows)
    return StaticVectors(out)


def training_data(text: TextArtifacts, tables: dict | None, static: StaticVectors | None, k=5,
                  valid_fraction=0.02, seed=0) -> TrainingData:
    rng = np.random.default_rng([seed, 0x7A1D])
    train, valid = {}, {}
    for li, l in enumerate(("x", "y")):
        train[li], valid[li] = split_valid(text.tokens[l], valid_fraction, rng)
    cands = {}
    if tables is not None:
        cands = {li: CandidateIndex(tables[l], text.vocab, k) for li, l in enumerate(("x", "y"))}
    invs = {li: text.inventories[l] for li, l in enumerate(("x", "y"))}
    return TrainingData(train, valid, invs, cands, static, len(text.vocab))


def frequent_word_precision(table: TranslationTable, cc: CipherCorpus, top=200):
    """Precision@1 of unigram table entries on the ``top`` most frequent base words."""
    counts = Counter(w for s in cc.corpus_x for w in s)
    words = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]]
    hits = sum(1 for w in words if w in table.entries and table.entries[w][0].tgt == cc.gold.mapping[w])
    return hits / len(words) if words else 0.0
