"""
Contextual word alignment after a short pre-training run
========================================================

Trains a small encoder with alternating MLM and cross-lingual MLM batches,
then aligns held-out sentence pairs by cosine argmax of word states and
compares the alignment error rate with a static-embedding baseline.
The default 2000 steps take about three minutes on one core.
"""
import argparse

from cmlm.config import load_config
from cmlm.evalsuite import align_words, align_words_static, evaluate_alignment
from cmlm.pipeline import (FIXTURE_MERGES, FIXTURE_SPEC, build_embeddings, build_mapping, build_static, build_tables,
                           build_text, training_data)
from cmlm.trainloop import Trainer

ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

text = build_text(FIXTURE_SPEC, num_merges=FIXTURE_MERGES)
m = build_mapping(text, build_embeddings(text))
tables = build_tables(text, m, k=5)
static = build_static(text.vocab, m)
pairs = text.cipher.parallel_eval

# the context-unaware baseline: mapped static token vectors, one per word
base = evaluate_alignment(pairs, lambda x, y: align_words_static(x, y, text.merges, text.vocab, static,
                                                                 return_views=True))
print("static  ", base.format())

# the small fixture-sized encoder
cfg = load_config(overrides=["global.preset=fixture", f"global.seed={args.seed}", f"pretrain.max_steps={args.steps}",
                             f"pretrain.warmup_steps={min(500, max(args.steps // 4, 1))}"])
data = training_data(text, tables, static, k=cfg.pretrain.candidates, seed=cfg.seed)
trainer = Trainer(cfg.encoder(len(text.vocab)), cfg.training(), data, cfg.cmlm())
best = trainer.run()
print("validation perplexity:", " -> ".join(f"{h:.1f}" for h in trainer.stopper.history))

rep = evaluate_alignment(pairs, lambda x, y: align_words(best, x, y, text.merges, text.vocab, return_views=True))
print("encoder ", rep.format())

# one aligned pair, gold links against predicted ones
p = pairs[0]
links = align_words(best, p.x, p.y, text.merges, text.vocab)
print(" ".join(p.x))
print(" ".join(p.y))
print("gold:", sorted(p.links))
print("pred:", sorted(links))
