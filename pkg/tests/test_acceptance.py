"""One test per acceptance criterion; each prints a PASS/FAIL line (collected again in the terminal summary)."""
import math
import time
from collections import Counter

import numpy as np
import pytest
from scipy.stats import ortho_group

from cmlm import tensorcore as tc
from cmlm.config import load_config
from cmlm.diagnostics import cmlm_grad_check, probe_state, synthetic_problem
from cmlm.encoder import EncoderConfig, EncoderState, encode
from cmlm.evalsuite import align_words, align_words_static, evaluate_alignment
from cmlm.objective import (ACT_MASK, CMLM, MLM, CandidateIndex, CmlmConfig, LossReport, MaskedSpan, MaskPlan,
                            alignment_prior, apply_plan, cmlm_loss, combine, mlm_loss, plan_masks, span_loss)
from cmlm.pipeline import frequent_word_precision, training_data
from cmlm.textpipe import JOINER, SPECIALS, NGramInventory, Vocabulary
from cmlm.trainloop import Trainer, make_streams
from cmlm.xmap import ScorerConfig, TableEntry, TranslationTable, infer_table, mapped_vectors, margin_sim, procrustes

LO = len(SPECIALS)
TRAIN_SEED = 0


def _fixture_config():
    return load_config(overrides=["global.preset=fixture", f"global.seed={TRAIN_SEED}"])


# -- 1 ----------------------------------------------------------------------------


def _row(V, probs):
    p = np.zeros(V)
    for i, v in probs.items():
        p[i] = v
    free = [i for i in range(V) if i not in probs]
    p[free] = (1.0 - sum(probs.values())) / len(free)
    return np.log(p)


def _table(vocab, src, cands):
    k = JOINER.join(vocab.tokens[i] for i in src)
    entries = [TableEntry(k, JOINER.join(vocab.tokens[i] for i in t), w, w) for t, w in cands]
    return CandidateIndex(TranslationTable("x->y", len(entries), {k: entries}), vocab), k


def test_criterion_1_cmlm_oracles(criterion):
    with criterion(1, "CMLM loss oracles") as rec:
        t0 = time.perf_counter()
        vocab = Vocabulary.build(Counter({f"w{i}": 9 - i for i in range(4)}))
        V = len(vocab)
        x1, x2, y1, y2 = LO, LO + 1, LO + 2, LO + 3

        # l = m = k = 1, a = 1, w = 1, p(y|x) = 0.25
        logp = np.array([_row(V, {y1: 0.25})])
        cands, key = _table(vocab, (x1,), [((y1,), 1.0)])
        state, h = probe_state(logp)
        plan = MaskPlan(0, [MaskedSpan(0, (x1,), key, [ACT_MASK])], CMLM)
        _, rep = cmlm_loss(state, h, [plan], cands, lambda s, t: np.ones((1, 1)))
        got1, direct1 = rep.span_losses[0], span_loss(logp, (y1,), np.ones((1, 1)))

        # l = m = 2 with the stated prior columns and probabilities
        logp = np.array([_row(V, {y1: 0.5, y2: 0.2}), _row(V, {y1: 0.1, y2: 0.4})])
        prior = np.array([[0.6, 0.3], [0.4, 0.7]])
        cands, key = _table(vocab, (x1, x2), [((y1, y2), 1.0)])
        state, h = probe_state(logp)
        plan = MaskPlan(0, [MaskedSpan(0, (x1, x2), key, [ACT_MASK] * 2)], CMLM)
        _, rep = cmlm_loss(state, h, [plan], cands, lambda s, t: prior)
        got2, direct2 = rep.span_losses[0], span_loss(logp, (y1, y2), prior)
        secs = time.perf_counter() - t0
        rec.detail = f"l=1 {got1:.6f} (direct {direct1:.6f}), l=2 {got2:.6f} (direct {direct2:.6f})"
        assert abs(got1 - direct1) <= 1e-6 and abs(got1 + math.log(0.25)) <= 1e-6
        assert abs(got2 - direct2) <= 1e-6 and abs(got2 + 2 * math.log(0.34)) <= 1e-6
        assert round(got1, 4) == 1.3863 and round(got2, 4) == 2.1576
        assert secs < 1.0


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_gradient_fidelity(criterion):
    with criterion(2, "CMLM gradient vs central differences") as rec:
        t0 = time.perf_counter()
        rep = cmlm_grad_check(layers=2, dim=32, heads=4, coords_per_param=6)
        secs = time.perf_counter() - t0
        rec.detail = f"max relative error {rep.max_rel_error:.2e} over {len(rep.per_param)} tensors"
        assert rep.max_rel_error <= 1e-3
        assert secs < 120


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_mlm_reduction(criterion):
    with criterion(3, "CMLM reduces to MLM with self-candidates") as rec:
        t0 = time.perf_counter()
        prob = synthetic_problem(0, n_tokens=40)
        V = len(prob.vocab)
        table = TranslationTable("x->x", 1, {k: [TableEntry(k, k, 1.0, 1.0)] for k in prob.inventory.entries})
        cands = CandidateIndex(table, prob.vocab, 1)
        cfg = EncoderConfig(vocab_size=V, layers=2, dim=32, heads=4, ffn=64, max_len=16, dropout=0.0)
        state = EncoderState.init(cfg, seed=1, dtype=np.float64)
        rng = np.random.default_rng(2)
        gaps = []
        for trial in range(100):
            s = rng.integers(LO, V, size=16)
            plan = plan_masks(s, prob.inventory, table, CMLM, CmlmConfig(k=1, mask_rate=0.3), rng, V)
            if not plan.spans:
                continue
            h = encode(state, apply_plan(s, plan, rng, V)[None], 0)
            lc, _ = cmlm_loss(state, h, [plan], cands, lambda a, b: np.eye(len(a)))
            lm, _ = mlm_loss(state, h, [MaskPlan(0, plan.spans, MLM)])
            gaps.append(abs(float(lc.data) - float(lm.data)))
        secs = time.perf_counter() - t0
        rec.detail = f"max |L_cmlm - L_mlm| {max(gaps):.2e} over {len(gaps)} plans"
        assert len(gaps) == 100
        assert max(gaps) <= 1e-6
        assert secs < 30


# -- 4 ----------------------------------------------------------------------------


def _subset(inv, n):
    keys = list(inv.keys())[:n]
    return NGramInventory(inv.lang, inv.n_max, inv.min_count, inv.top_m, {k: inv.entries[k] for k in keys})


def test_criterion_4_margin_table_exact(criterion, fixture_stack):
    with criterion(4, "margin scores and tables equal brute force") as rec:
        t0 = time.perf_counter()
        fx = fixture_stack
        m = fx.mapping
        inv_s = _subset(fx.text.inventories["x"], 250)
        inv_t = _subset(fx.text.inventories["y"], 250)
        cfg = ScorerConfig()
        tab = infer_table(inv_s, inv_t, m.src, m.tgt, k=5, cfg=cfg, W_src=m.W)
        skeys = [u for u in inv_s.keys() if u in m.src]
        tkeys = [u for u in inv_t.keys() if u in m.tgt]
        sv = dict(zip(skeys, mapped_vectors(skeys, m.src, m.W)))
        tv = dict(zip(tkeys, mapped_vectors(tkeys, m.tgt, None)))
        mismatches = 0
        for s in skeys:
            scores = [(margin_sim(s, t, sv, tv, cfg), j) for j, t in enumerate(tkeys)]
            best = sorted(scores, key=lambda p: (-p[0], p[1]))[:5]
            want = [(tkeys[j], v) for v, j in best]
            if s in tab.entries:
                mismatches += [(e.tgt, e.sim) for e in tab.entries[s]] != want
            else:
                mismatches += any(v > 0 for _, v in want)
        secs = time.perf_counter() - t0
        rec.detail = f"{len(skeys)}x{len(tkeys)} n-grams, {mismatches} mismatching sources"
        assert mismatches == 0
        assert secs < 30


# -- 5 ----------------------------------------------------------------------------


def test_criterion_5_masking_statistics(criterion, fixture_stack):
    with criterion(5, "masking and code-switch rates") as rec:
        t0 = time.perf_counter()
        fx = fixture_stack
        inv = fx.text.inventories["x"]
        V = len(fx.text.vocab)
        rng = np.random.default_rng(5)
        streams = make_streams(fx.text.tokens["x"], 64, rng)
        while len(streams) < 10000:
            streams += make_streams(fx.text.tokens["x"], 64, rng)
        streams = streams[:10000]
        covered = real = 0
        acts = Counter()
        for s in streams:
            p = plan_masks(s, inv, None, MLM, CmlmConfig(), rng, V)
            covered += p.covered()
            real += int(np.sum(s >= LO))
            acts.update(a for sp in p.spans for a in sp.actions)
        cov = covered / real
        mask_frac = acts[ACT_MASK] / sum(acts.values())

        cfg = _fixture_config()
        tcfg = cfg.training()
        tcfg.batch_size = 1
        data = training_data(fx.text, fx.tables, fx.static, k=cfg.pretrain.candidates, seed=TRAIN_SEED)
        tr = Trainer(cfg.encoder(V), tcfg, data, cfg.cmlm())
        switched = [tr.prepare_batch(2 * i)[1][0].code_switched for i in range(10000)]
        cs_frac = float(np.mean(switched))
        secs = time.perf_counter() - t0
        rec.detail = f"coverage {cov:.4f}, MASK fraction {mask_frac:.4f}, code-switched MLM batches {cs_frac:.4f}"
        assert 0.14 <= cov <= 0.16
        assert 0.68 <= mask_frac <= 0.72
        assert 0.48 <= cs_frac <= 0.52
        assert secs < 60


# -- 6 ----------------------------------------------------------------------------


def test_criterion_6_lexicon_induction(criterion, fixture_stack):
    with criterion(6, "precision@1 on the 200 most frequent words") as rec:
        fx = fixture_stack
        p = frequent_word_precision(fx.tables["x"], fx.text.cipher, top=200)
        rec.detail = f"p@1 {p:.3f}, pipeline built in {fx.seconds:.0f}s"
        assert p >= 0.9
        assert fx.seconds < 300


# -- 7 and 8 share one pair of fixture training runs ------------------------------------


@pytest.fixture(scope="module")
def fixture_training(fixture_stack):
    fx = fixture_stack
    cfg = _fixture_config()
    V = len(fx.text.vocab)
    pairs = fx.text.cipher.parallel_eval
    out = {"seconds": 0.0}
    for obj in ("cmlm+mlm", "mlm"):
        t0 = time.perf_counter()
        tables = fx.tables if obj != "mlm" else None
        static = fx.static if obj != "mlm" else None
        data = training_data(fx.text, tables, static, k=cfg.pretrain.candidates, seed=TRAIN_SEED)
        tr = Trainer(cfg.encoder(V), cfg.training(obj), data, cfg.cmlm())
        best = tr.run()
        rep = evaluate_alignment(pairs, lambda x, y: align_words(best, x, y, fx.text.merges, fx.text.vocab,
                                                                 return_views=True))
        out[obj] = (tr, rep)
        out["seconds"] += time.perf_counter() - t0
    t0 = time.perf_counter()
    out["static"] = evaluate_alignment(pairs, lambda x, y: align_words_static(
        x, y, fx.text.merges, fx.text.vocab, fx.static, return_views=True))
    out["seconds"] += time.perf_counter() - t0
    return out


def test_criterion_7_alignment_ordering(criterion, fixture_training):
    with criterion(7, "AER ordering CMLM < static baseline and CMLM < MLM-only") as rec:
        ft = fixture_training
        a_c, a_m, a_s = ft["cmlm+mlm"][1].aer, ft["mlm"][1].aer, ft["static"].aer
        steps = ft["cmlm+mlm"][0].step
        rec.detail = f"AER cmlm {a_c:.4f}, mlm-only {a_m:.4f}, static {a_s:.4f} after {steps} steps"
        assert a_c < a_s
        assert a_c < a_m
        assert ft["seconds"] <= 600


def test_criterion_8_training_sanity(criterion, fixture_training, fixture_stack):
    with criterion(8, "validation perplexity falls and training replays") as rec:
        tr = fixture_training["cmlm+mlm"][0]
        hist = tr.stopper.history
        fx = fixture_stack
        cfg = _fixture_config()
        runs = []
        for _ in range(2):
            data = training_data(fx.text, fx.tables, fx.static, k=cfg.pretrain.candidates, seed=TRAIN_SEED)
            t = Trainer(cfg.encoder(len(fx.text.vocab)), cfg.training(), data, cfg.cmlm())
            for _ in range(20):
                t.train_step()
            runs.append(t)
        identical = all(np.array_equal(runs[0].state.params[k].data, runs[1].state.params[k].data)
                        for k in runs[0].state.params)
        rec.detail = (f"avg perplexity {hist[0]:.1f} at step 0 -> {hist[-1]:.1f} at the end; "
                      f"20-step replay {'bit-identical' if identical else 'differs'}")
        assert hist[-1] < hist[0]
        assert identical


# -- 9 ----------------------------------------------------------------------------


def test_criterion_9_invariants(criterion, fixture_stack):
    with criterion(9, "numerical invariants, 1k trials each") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(9)
        worst = {}
        for _ in range(1000):
            x = rng.normal(0, 10, (int(rng.integers(1, 6)), int(rng.integers(2, 30))))
            s = tc.softmax(tc.Tensor(x)).data
            worst["softmax"] = max(worst.get("softmax", 0), np.abs(s.sum(axis=-1) - 1).max())
        for _ in range(1000):
            d = int(rng.integers(8, 64))
            x = rng.normal(rng.normal(0, 5), rng.uniform(0.5, 5), (3, d))
            y = tc.layer_norm(tc.Tensor(x), tc.Tensor(np.ones(d)), tc.Tensor(np.zeros(d))).data
            var_want = x.var(axis=-1) / (x.var(axis=-1) + 1e-5)
            err = max(np.abs(y.mean(axis=-1)).max(), np.abs(y.var(axis=-1) - var_want).max())
            worst["layer_norm"] = max(worst.get("layer_norm", 0), err)
        for _ in range(1000):
            d = int(rng.integers(2, 16))
            X, Z = rng.standard_normal((2 * d, d)), rng.standard_normal((2 * d, d))
            W = procrustes(X, Z @ ortho_group.rvs(d, random_state=rng) if d > 1 else Z,
                           [(i, i) for i in range(2 * d)])
            worst["orthogonality"] = max(worst.get("orthogonality", 0), W.orthogonality_error())
        worst["orthogonality"] = max(worst["orthogonality"], fixture_stack.mapping.W.orthogonality_error())
        for _ in range(1000):
            l, mm = int(rng.integers(1, 8)), int(rng.integers(1, 8))
            a = alignment_prior(rng.standard_normal((l, 16)), rng.standard_normal((mm, 16)),
                                rng.uniform(0.05, 5)).a
            worst["prior_columns"] = max(worst.get("prior_columns", 0), np.abs(a.sum(axis=0) - 1).max())
        add_fail = 0
        for _ in range(1000):
            c = list(rng.uniform(0, 10, int(rng.integers(0, 5))))
            m = list(rng.uniform(0, 10, int(rng.integers(0, 5))))
            want = (float(np.mean(c)) if c else 0.0) + (float(np.mean(m)) if m else 0.0)
            r = LossReport(l_cmlm=float(rng.uniform(0, 10)), l_mlm=float(rng.uniform(0, 10)))
            add_fail += combine(c, m) != want or r.l_pre != r.l_cmlm + r.l_mlm
        secs = time.perf_counter() - t0
        rec.detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", additivity failures {add_fail}"
        assert worst["softmax"] <= 1e-12
        assert worst["layer_norm"] <= 1e-9
        assert worst["orthogonality"] <= 1e-6
        assert worst["prior_columns"] <= 1e-9
        assert add_fail == 0
        assert secs < 60
