"""Mask planning, code-switching, the alignment prior and the MLM / CMLM losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .encoder import token_logprobs
from .textpipe import BOS, EOS, JOINER, MASK, PAD, SPECIALS, NGramInventory, Vocabulary
from .xmap import TranslationTable

log = logging.getLogger(__name__)

MLM, CMLM = "mlm", "cmlm"
ACT_MASK, ACT_RANDOM, ACT_KEEP = "mask", "random", "keep"
_PAD_LOGA = -1e9


@dataclass
class CmlmConfig:
    k: int = 5
    tau: float = 1.0
    mask_rate: float = 0.15
    mask_token_prob: float = 0.70
    random_token_prob: float = 0.15
    code_switch_prob: float = 0.5
    code_switch_rate: float = 0.15

    def validate(self):
        for name in ("mask_rate", "mask_token_prob", "random_token_prob", "code_switch_prob", "code_switch_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mask_token_prob + self.random_token_prob > 1.0:
            raise ValueError("mask and random action probabilities exceed 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class MaskedSpan:
    start: int
    tokens: tuple  # identities before masking
    key: str | None
    actions: list
    fallback: bool = False

    @property
    def length(self):
        return len(self.tokens)


@dataclass
class MaskPlan:
    stream_id: int
    spans: list
    kind: str
    code_switched: bool = False

    def covered(self):
        return sum(s.length for s in self.spans)

    def positions(self):
        return [s.start + i for s in self.spans for i in range(s.length)]


@dataclass
class AlignmentPrior:
    a: np.ndarray  # (l, m); column j is a distribution over source positions
    tau: float


@dataclass
class LossReport:
    l_cmlm: float = 0.0
    l_mlm: float = 0.0
    masked_tokens: int = 0
    span_losses: list = field(default_factory=list)
    empty_plans: int = 0

    @property
    def l_pre(self):
        return self.l_cmlm + self.l_mlm


def _is_real(tok):
    return tok >= len(SPECIALS)


def segment_spans(stream, inventory: NGramInventory | None, exclude=frozenset()):
    """Leftmost-longest inventory segmentation of the real-token runs of a stream.

    Returns (start, length, key) triples; positions in ``exclude`` never enter a span.
    """
    by_ids = inventory.by_ids if inventory is not None else {}
    orders = sorted({len(g) for g in by_ids}, reverse=True)
    out = []
    i, L = 0, len(stream)
    while i < L:
        if not _is_real(stream[i]) or i in exclude:
            i += 1
            continue
        for n in orders:
            if n > 1 and i + n <= L:
                window = stream[i : i + n]
                if all(_is_real(t) and (i + o) not in exclude for o, t in enumerate(window)):
                    key = by_ids.get(tuple(window))
                    if key is not None:
                        out.append((i, n, key))
                        i += n
                        break
        else:
            out.append((i, 1, by_ids.get((stream[i],))))
            i += 1
    return out


def _sample_spans(candidates, n_real, rate, rng):
    target = rate * n_real
    picked, covered = [], 0
    if target <= 0:
        return picked
    for idx in rng.permutation(len(candidates)):
        if covered >= target:
            break
        n = candidates[idx][1]
        if covered + n > target:
            # keep the overshooting span with probability matching the shortfall
            if rng.random() < (target - covered) / n:
                picked.append(candidates[idx])
            break
        picked.append(candidates[idx])
        covered += n
    return sorted(picked)


def plan_masks(stream, inventory, table: TranslationTable | None, kind, cfg: CmlmConfig, rng, vocab_size,
               stream_id=0, exclude=frozenset()) -> MaskPlan:
    """Choose n-gram spans covering about ``cfg.mask_rate`` of the real tokens and their per-token actions."""
    stream = [int(t) for t in stream]
    cands = segment_spans(stream, inventory, exclude)
    n_real = sum(1 for i, t in enumerate(stream) if _is_real(t) and i not in exclude)
    spans = []
    for start, n, key in _sample_spans(cands, n_real, cfg.mask_rate, rng):
        u = rng.random(n)
        acts = [ACT_MASK if x < cfg.mask_token_prob else
                ACT_RANDOM if x < cfg.mask_token_prob + cfg.random_token_prob else ACT_KEEP for x in u]
        fallback = kind == CMLM and (key is None or table is None or key not in table)
        spans.append(MaskedSpan(start, tuple(stream[start : start + n]), key, acts, fallback))
    return MaskPlan(stream_id, spans, kind)


def apply_plan(stream, plan: MaskPlan, rng, vocab_size):
    """Input ids with the plan's actions applied."""
    out = np.array(stream, dtype=np.int64, copy=True)
    for s in plan.spans:
        for i, act in enumerate(s.actions):
            if act == ACT_MASK:
                out[s.start + i] = MASK
            elif act == ACT_RANDOM:
                out[s.start + i] = rng.integers(len(SPECIALS), vocab_size)
    return out


class CandidateIndex:
    """Translation candidates as token-id tuples with renormalised weights."""

    def __init__(self, table: TranslationTable, vocab: Vocabulary, k=None):
        self.table = table
        self.cands = {}
        for src, entries in table.entries.items():
            entries = entries[:k] if k else entries
            ids, w = [], []
            for e in entries:
                toks = e.tgt.split(JOINER)
                if not toks or any(t not in vocab.index for t in toks):
                    continue
                ids.append(tuple(vocab.index[t] for t in toks))
                w.append(max(e.weight, 0.0))
            w = np.asarray(w, dtype=np.float64)
            if len(ids) and w.sum() > 0:
                self.cands[src] = (ids, w / w.sum())

    def __contains__(self, key):
        return key in self.cands

    def __len__(self):
        return len(self.cands)

    def get(self, key):
        return self.cands.get(key)


def code_switch(stream, inventory, cands: CandidateIndex, cfg: CmlmConfig, rng, stream_len=None):
    """Replace sampled source n-grams by a weighted draw from their translation candidates.

    Returns the new stream (re-fitted to ``stream_len`` if given) and the
    replaced spans as (start, length) in the new stream.
    """
    stream = [int(t) for t in stream]
    spans = [c for c in segment_spans(stream, inventory)]
    n_real = sum(1 for t in stream if _is_real(t))
    picked = _sample_spans(spans, n_real, cfg.code_switch_rate, rng)
    out, replaced, prev = [], [], 0
    for start, n, key in picked:
        entry = cands.get(key) if key is not None else None
        if entry is None:
            continue
        ids, w = entry
        choice = ids[rng.choice(len(ids), p=w)]
        out.extend(stream[prev:start])
        replaced.append((len(out), len(choice)))
        out.extend(choice)
        prev = start + n
    out.extend(stream[prev:])
    if stream_len is not None:
        if len(out) > stream_len:
            out = out[:stream_len]
            replaced = [(s, min(n, stream_len - s)) for s, n in replaced if s < stream_len]
        else:
            out = out + [PAD] * (stream_len - len(out))
    return out, replaced


# -- alignment prior ------------------------------------------------------


class StaticVectors:
    """Mapped static token vectors for each language, rows indexed by vocabulary id."""

    def __init__(self, by_lang: dict):
        self.by_lang = {k: np.asarray(v, dtype=np.float64) for k, v in by_lang.items()}

    def rows(self, lang, ids):
        return self.by_lang[lang][np.asarray(ids, dtype=np.int64)]


def _cos_rows(A, B):
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    return (A / na) @ (B / nb).T


def alignment_prior(src_vecs, tgt_vecs, tau=1.0) -> AlignmentPrior:
    """a[i, j] = softmax over source positions i of cos(x_i, y_j) / tau.

    Plain numpy, so it stays outside the differentiable graph.
    """
    c = _cos_rows(np.atleast_2d(src_vecs), np.atleast_2d(tgt_vecs)) / tau
    c = c - c.max(axis=0, keepdims=True)
    e = np.exp(c)
    return AlignmentPrior(e / e.sum(axis=0, keepdims=True), tau)


def static_prior_fn(static: StaticVectors, src_lang, tgt_lang, tau=1.0):
    def fn(src_ids, tgt_ids):
        return alignment_prior(static.rows(src_lang, src_ids), static.rows(tgt_lang, tgt_ids), tau).a

    return fn


# -- losses ---------------------------------------------------------------


def _flat_positions(plans, T):
    rows, owner = [], []
    for b, plan in enumerate(plans):
        for si, s in enumerate(plan.spans):
            for i in range(s.length):
                rows.append(b * T + s.start + i)
                owner.append((b, si, i))
    return np.asarray(rows, dtype=np.int64), owner


def mlm_loss(state, states: tc.Tensor, plans) -> tuple:
    """Mean cross-entropy at covered positions against the original tokens."""
    T = states.shape[1]
    rows, _ = _flat_positions(plans, T)
    report = LossReport()
    if len(rows) == 0:
        report.empty_plans += 1
        return tc.Tensor(np.zeros((), dtype=states.dtype)), report
    targets = np.array([t for p in plans for s in p.spans for t in s.tokens], dtype=np.int64)
    lp = token_logprobs(state, states, rows)
    picked = tc.gather_flat(lp, np.arange(len(rows)) * lp.shape[1] + targets)
    loss = tc.neg(tc.mean(picked))
    report.l_mlm = float(loss.data)
    report.masked_tokens = len(rows)
    return loss, report


def cmlm_terms(plans, cands: CandidateIndex, prior_fn):
    """Flatten every (span, candidate, target position j) into one logsumexp group.

    Returns per-group (rows into the masked-position list, target token, log a)
    padded to a common width, the group coefficients, the normaliser and the
    owning span of each group.
    """
    groups_row, groups_tok, groups_loga, coef, owner = [], [], [], [], []
    denom = 0.0
    base = 0
    for b, plan in enumerate(plans):
        for si, s in enumerate(plan.spans):
            l = s.length
            local = list(range(base, base + l))
            entry = None if s.fallback else cands.get(s.key)
            if entry is None:
                for i in range(l):
                    groups_row.append([local[i]])
                    groups_tok.append(s.tokens[i])
                    groups_loga.append([0.0])
                    coef.append(-1.0)
                    owner.append((b, si))
                denom += l
            else:
                ids, w = entry
                for c, (tgt, wc) in enumerate(zip(ids, w)):
                    a = np.asarray(prior_fn(s.tokens, tgt), dtype=np.float64)
                    if a.shape != (l, len(tgt)):
                        raise ValueError(f"prior has shape {a.shape}, expected {(l, len(tgt))}")
                    with np.errstate(divide="ignore"):
                        loga = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), _PAD_LOGA)
                    for j, y in enumerate(tgt):
                        groups_row.append(local)
                        groups_tok.append(y)
                        groups_loga.append(list(loga[:, j]))
                        coef.append(-wc)
                        owner.append((b, si))
                    denom += wc * len(tgt)
            base += l
    if not coef:
        return None
    width = max(len(r) for r in groups_row)
    G = len(coef)
    rows = np.zeros((G, width), dtype=np.int64)
    loga = np.full((G, width), _PAD_LOGA)
    for g, (r, la) in enumerate(zip(groups_row, groups_loga)):
        rows[g, : len(r)] = r
        loga[g, : len(la)] = la
    return rows, np.asarray(groups_tok, dtype=np.int64), loga, np.asarray(coef), denom, owner


def cmlm_loss(state, states: tc.Tensor, plans, cands: CandidateIndex, prior_fn, cfg: CmlmConfig | None = None):
    """IBM-Model-2 style loss for masked n-grams predicting their translation candidates.

    Per span and candidate ``c``: ``-w_c * sum_j log sum_i a(i|j) p(y_j | h_i)``;
    spans without candidates fall back to cross-entropy on their own tokens.
    The batch loss is the sum of span losses over the (weighted) number of
    predicted target tokens. Priors are constants; gradients reach the model
    only through ``log p``.
    """
    T = states.shape[1]
    rows, _ = _flat_positions(plans, T)
    report = LossReport()
    terms = cmlm_terms(plans, cands, prior_fn)
    if terms is None:
        report.empty_plans += 1
        return tc.Tensor(np.zeros((), dtype=states.dtype)), report
    grows, gtok, loga, coef, denom, owner = terms
    lp = token_logprobs(state, states, rows)
    V = lp.shape[1]
    picked = tc.gather_flat(lp, grows * V + gtok[:, None])
    lse = tc.logsumexp(picked + tc.Tensor(loga.astype(states.dtype)), axis=-1)
    total = tc.sum_(tc.mul(lse, tc.Tensor(coef.astype(states.dtype))))
    loss = tc.scale(total, 1.0 / denom)
    span_tot = {}
    for g, key in enumerate(owner):
        span_tot[key] = span_tot.get(key, 0.0) + coef[g] * float(lse.data[g])
    report.span_losses = [span_tot[k] for k in sorted(span_tot)]
    report.l_cmlm = float(loss.data)
    report.masked_tokens = len(rows)
    return loss, report


def span_loss(logp_rows, tgt_ids, prior):
    """Direct evaluation of one span/candidate term from explicit probabilities (numpy).

    ``logp_rows[i, v]`` is log p(v | h_i); ``prior[i, j]`` is a(i|j).
    """
    p = np.exp(np.asarray(logp_rows, dtype=np.float64))
    return float(-sum(np.log(np.sum(prior[:, j] * p[:, y])) for j, y in enumerate(tgt_ids)))


def combine(cmlm_values, mlm_values):
    """Sum of the window means of the two objectives."""
    c = float(np.mean(cmlm_values)) if len(cmlm_values) else 0.0
    m = float(np.mean(mlm_values)) if len(mlm_values) else 0.0
    return c + m
