"""
The cross-lingual masked-LM loss on numbers small enough to check by hand
=========================================================================

A masked source n-gram x_1..x_l is asked to predict a target n-gram
y_1..y_m. Each target token is explained by a mixture over source positions,
weighted by an alignment prior a(i|j) built from static cross-lingual
embeddings:  -sum_j log sum_i a(i|j) p(y_j | h_i).
"""
import math

import numpy as np

from cmlm.diagnostics import cmlm_grad_check, probe_state
from cmlm.objective import (ACT_MASK, CMLM, CandidateIndex, MaskedSpan, MaskPlan, alignment_prior, cmlm_loss,
                            span_loss)
from cmlm.textpipe import JOINER, SPECIALS, Vocabulary
from cmlm.xmap import TableEntry, TranslationTable

# the prior: a softmax over source positions of cosine similarity
a = alignment_prior(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0]])).a
print("prior column for y_1:", a[:, 0].round(4), "sums to", a[:, 0].sum())

# two masked source tokens, two target tokens, explicit probabilities
vocab = Vocabulary.build({"x1": 4, "x2": 3, "y1": 2, "y2": 1})
x1, x2, y1, y2 = (vocab.id(t) for t in ("x1", "x2", "y1", "y2"))
V = len(vocab)
p = np.full((2, V), 0.0)
p[0, [y1, y2]] = 0.5, 0.2
p[1, [y1, y2]] = 0.1, 0.4
for r in p:
    r[r == 0] = (1 - r.sum()) / (r == 0).sum()
prior = np.array([[0.6, 0.3],
                  [0.4, 0.7]])

# by hand: 0.6*0.5 + 0.4*0.1 = 0.34 and 0.3*0.2 + 0.7*0.4 = 0.34
print("by hand:", -2 * math.log(0.34))
print("direct: ", span_loss(np.log(p), (y1, y2), prior))

# the same through the batched loss; probe_state makes the encoder emit exactly log p
key = JOINER.join(["x1", "x2"])
table = TranslationTable("x->y", 1, {key: [TableEntry(key, JOINER.join(["y1", "y2"]), 1.0, 1.0)]})
state, h = probe_state(np.log(p))
plan = MaskPlan(0, [MaskedSpan(0, (x1, x2), key, [ACT_MASK, ACT_MASK])], CMLM)
loss, rep = cmlm_loss(state, h, [plan], CandidateIndex(table, vocab), lambda s, t: prior)
print("batched span loss:", rep.span_losses[0], " per target token:", float(loss.data))

# gradients of the full loss through a small float64 encoder against central differences
print(cmlm_grad_check(coords_per_param=3).format().splitlines()[0])
