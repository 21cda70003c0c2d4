"""
Inducing a translation table from two unaligned cipher corpora
===============================================================

Two corpora are generated from one hidden language: the second one is a
word-for-word cipher of the first with a few local swaps. Nothing links the
two sides except 64 shared anchor words. Skip-gram embeddings, an orthogonal
mapping grown by self-learning and margin-scored n-gram tables recover most
of the cipher.
"""
import argparse
from collections import Counter

from cmlm.embed import SgnsConfig
from cmlm.evalsuite import table_precision
from cmlm.pipeline import (FIXTURE_MERGES, FIXTURE_SPEC, build_embeddings, build_mapping, build_tables, build_text,
                           frequent_word_precision)
from cmlm.textpipe import JOINER

ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
ap.add_argument("--epochs", type=int, default=5)
args = ap.parse_args()

# a hidden language with a Zipfian vocabulary, enciphered into Greek-letter words (about 30 s in all)
text = build_text(FIXTURE_SPEC, num_merges=FIXTURE_MERGES)
cc = text.cipher
print("x:", " ".join(cc.corpus_x[0]))
print("y:", " ".join(cc.corpus_y[0]))
print(f"{len(text.vocab)} shared BPE tokens, "
      f"{len(text.inventories['x'])} / {len(text.inventories['y'])} frequent n-grams")

# monolingual embeddings over tokens and n-grams, one space per language
embs = build_embeddings(text, SgnsConfig(epochs=args.epochs))

# start from the anchors, then alternate Procrustes with mutual-nearest-neighbour dictionaries
m = build_mapping(text, embs)
print(f"dictionary grew from {len(cc.gold.anchors)} anchors to {len(m.dictionary)} pairs; "
      f"|W'W - I| = {m.W.orthogonality_error():.1e}")

# margin-scored top-5 candidates for every n-gram in both directions
tables = build_tables(text, m, k=5)
score = table_precision(tables["x"], cc.gold)
for order, (p, n) in score.per_order.items():
    print(f"order {order}: precision@1 {p:.3f} over {n} sources")
print(f"precision@1 on the 200 most frequent words: {frequent_word_precision(tables['x'], cc):.3f}")

# the most frequent source words, their top candidates and the hidden answer
counts = Counter(w for sent in cc.corpus_x for w in sent)
for w, _ in counts.most_common(8)[3:8]:
    cands = ", ".join(f"{e.tgt.replace(JOINER, ' ')} ({e.weight:.2f})" for e in tables["x"].entries[w][:3])
    print(f"{w} -> {cands}   gold: {cc.gold.mapping[w]}")
