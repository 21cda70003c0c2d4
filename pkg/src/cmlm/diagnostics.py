"""Small synthetic problems for checking the CMLM gradient end to end."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from . import tensorcore as tc
from .encoder import EncoderConfig, EncoderState, encode
from .objective import CMLM, CandidateIndex, CmlmConfig, StaticVectors, apply_plan, cmlm_loss, plan_masks, static_prior_fn
from .textpipe import JOINER, SPECIALS, NGram, NGramInventory, Vocabulary
from .xmap import TableEntry, TranslationTable


@dataclass
class SyntheticProblem:
    vocab: Vocabulary
    inventory: NGramInventory
    table: TranslationTable
    cands: CandidateIndex
    static: StaticVectors
    inputs: np.ndarray
    plans: list


def synthetic_problem(seed=0, n_tokens=30, stream_len=12, batch=2, k=3, mask_rate=0.4, dim=8):
    """Random vocabulary, bigram-rich inventory, k-candidate table and masked CMLM batch."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.build(Counter({f"w{i}": n_tokens - i for i in range(n_tokens)}))
    lo, V = len(SPECIALS), len(vocab)
    streams = rng.integers(lo, V, size=(batch, stream_len))
    entries = {}
    for t in range(lo, V):
        entries[vocab.tokens[t]] = NGram((t,), "x", 1)
    for row in streams:
        for i in range(0, stream_len - 1, 3):
            g = (int(row[i]), int(row[i + 1]))
            entries[JOINER.join(vocab.tokens[j] for j in g)] = NGram(g, "x", 1)
    inventory = NGramInventory("x", 2, 1, len(entries), entries)
    table = {}
    for n, key in enumerate(sorted(entries)):
        if n % 4 == 3:
            continue  # leave some spans without candidates
        cand = []
        for _ in range(k):
            m = int(rng.integers(1, 3))
            cand.append(JOINER.join(vocab.tokens[int(j)] for j in rng.integers(lo, V, size=m)))
        w = rng.random(k) + 0.1
        sims = np.sort(w)[::-1]
        table[key] = [TableEntry(key, c, float(s), float(s / sims.sum())) for c, s in zip(cand, sims)]
    table = TranslationTable("x->y", k, table)
    cands = CandidateIndex(table, vocab, k)
    static = StaticVectors({"x": rng.standard_normal((V, dim)), "y": rng.standard_normal((V, dim))})
    cfg = CmlmConfig(k=k, mask_rate=mask_rate)
    plans, inputs = [], []
    for b, s in enumerate(streams):
        p = plan_masks(s, inventory, table, CMLM, cfg, rng, V, stream_id=b)
        plans.append(p)
        inputs.append(apply_plan(s, p, rng, V))
    return SyntheticProblem(vocab, inventory, table, cands, static, np.stack(inputs), plans)


def cmlm_grad_check(layers=2, dim=32, heads=4, seed=0, coords_per_param=6, h=1e-5) -> tc.GradCheckReport:
    """Reverse-mode vs central-difference gradient of the CMLM loss on a float64 encoder, dropout off."""
    prob = synthetic_problem(seed)
    cfg = EncoderConfig(vocab_size=len(prob.vocab), layers=layers, dim=dim, heads=heads, ffn=2 * dim,
                        max_len=prob.inputs.shape[1], dropout=0.0)
    state = EncoderState.init(cfg, seed=seed, dtype=np.float64)
    # larger init so that every parameter carries a measurable gradient
    rng = np.random.default_rng(seed + 1)
    for name, p in state.params.items():
        p.data += 0.1 * rng.standard_normal(p.shape)
    prior = static_prior_fn(prob.static, "x", "y")

    def f():
        h_ = encode(state, prob.inputs, 0, train=False)
        return cmlm_loss(state, h_, prob.plans, prob.cands, prior)[0]

    return tc.grad_check(f, state.params, h=h, coords_per_param=coords_per_param, rng=np.random.default_rng(seed))


def probe_state(logp):
    """Encoder state plus hidden states whose output log-distributions are exactly ``logp`` rows.

    Identity token embeddings and a zero output bias turn each hidden row into
    its own logits, so hand-written probabilities can be fed to the losses.
    ``logp`` has shape (T, V) or (B, T, V) and rows must be normalised.
    """
    logp = np.asarray(logp, dtype=np.float64)
    if logp.ndim == 2:
        logp = logp[None]
    V = logp.shape[-1]
    cfg = EncoderConfig(vocab_size=V, layers=0, dim=V, heads=1, ffn=1, max_len=logp.shape[1], dropout=0.0)
    state = EncoderState.init(cfg, dtype=np.float64)
    state.params["tok_emb"].data[...] = np.eye(V)
    state.params["out_bias"].data[...] = 0.0
    return state, tc.Tensor(logp)
