"""Streams, batches and the alternating MLM / CMLM pre-training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .encoder import EncoderConfig, EncoderState, encode
from .objective import (CMLM, MLM, CandidateIndex, CmlmConfig, apply_plan, cmlm_loss, code_switch, mlm_loss,
                        plan_masks, static_prior_fn)
from .textpipe import BOS, EOS, LANGS, PAD

log = logging.getLogger(__name__)


@dataclass
class StreamBatch:
    ids: np.ndarray  # (batch, stream_len)
    lang: int

    @property
    def attention_mask(self):
        return self.ids != PAD


def make_streams(corpus, stream_len, rng):
    """Shuffle sentences, join with EOS, cut into BOS-prefixed fixed-length streams."""
    if stream_len < 2:
        raise ValueError("stream_len must be >= 2")
    order = rng.permutation(len(corpus)) if rng is not None else np.arange(len(corpus))
    flat = []
    for i in order:
        flat.extend(corpus[i])
        flat.append(EOS)
    body = stream_len - 1
    streams = []
    for s in range(0, len(flat), body):
        chunk = flat[s : s + body]
        row = [BOS] + chunk + [PAD] * (body - len(chunk))
        streams.append(np.asarray(row, dtype=np.int64))
    return streams


@dataclass
class TrainConfig:
    stream_len: int = 128
    batch_size: int = 16
    max_steps: int = 20000
    eval_every: int = 500
    patience: int = 5
    peak_lr: float = 5e-4
    warmup_steps: int = 1000
    seed: int = 0
    objectives: str = "cmlm+mlm"  # or "mlm"
    valid_fraction: float = 0.02
    valid_streams: int = 32
    max_bad_steps: int = 10

    def validate(self):
        if self.objectives not in ("cmlm+mlm", "mlm", "cmlm"):
            raise ValueError(f"unknown objectives {self.objectives!r}")


FULL_SCALE_TRAIN = dict(stream_len=256, batch_size=64)


def objective_kind(cfg: TrainConfig, step: int) -> str:
    if cfg.objectives == "mlm":
        return MLM
    if cfg.objectives == "cmlm":
        return CMLM
    return MLM if step % 2 == 0 else CMLM


def batch_language(step: int) -> int:
    # languages swap every two steps so each language sees both objectives
    return (step // 2) % 2


@dataclass
class StopCriterion:
    patience: int
    best: float = math.inf
    bad: int = 0
    history: list = field(default_factory=list)

    def update(self, ppls: dict) -> bool:
        """Record one evaluation; returns True when training should stop."""
        avg = float(np.mean(list(ppls.values())))
        if not avg > 0:
            raise ValueError("perplexity must be positive")
        self.history.append(avg)
        if avg < self.best:
            self.best = avg
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainingData:
    """Everything the loop consumes, per language index."""

    train: dict  # lang index -> list of token-id sentences
    valid: dict
    inventories: dict  # lang index -> NGramInventory
    cands: dict  # lang index -> CandidateIndex (source = that language)
    static: object  # StaticVectors keyed by language name
    vocab_size: int


def split_valid(corpus, fraction, rng):
    n = len(corpus)
    nv = max(1, int(round(n * fraction))) if n > 1 else 0
    idx = rng.permutation(n)
    valid = [corpus[i] for i in sorted(idx[:nv])]
    train = [corpus[i] for i in sorted(idx[nv:])]
    return train, valid


def _fixed_valid_plans(streams, inventory, vocab_size, cmlm_cfg, seed):
    rng = np.random.default_rng([seed, 0xE7A1])
    plans, inputs = [], []
    for i, s in enumerate(streams):
        p = plan_masks(s, inventory, None, MLM, cmlm_cfg, rng, vocab_size, stream_id=i)
        plans.append(p)
        inputs.append(apply_plan(s, p, rng, vocab_size))
    return plans, inputs


def eval_perplexity(state: EncoderState, streams, lang: int, inventory, cmlm_cfg: CmlmConfig, seed=0,
                    batch_size=16, return_loss=False):
    """exp of mean MLM cross-entropy under a masking plan that depends only on ``seed``."""
    plans, inputs = _fixed_valid_plans(streams, inventory, state.cfg.vocab_size, cmlm_cfg, seed)
    tot, n = 0.0, 0
    for b in range(0, len(streams), batch_size):
        ids = np.stack(inputs[b : b + batch_size])
        pl = plans[b : b + batch_size]
        h = encode(state, ids, lang, train=False)
        loss, rep = mlm_loss(state, h, pl)
        tot += float(loss.data) * rep.masked_tokens
        n += rep.masked_tokens
    ce = tot / max(n, 1)
    ppl = math.exp(ce)
    return (ppl, ce) if return_loss else ppl


class Trainer:
    def __init__(self, enc_cfg: EncoderConfig, cfg: TrainConfig, data: TrainingData,
                 cmlm_cfg: CmlmConfig = CmlmConfig(), dtype=np.float32, metrics_path=None):
        cfg.validate()
        cmlm_cfg.validate()
        self.cfg, self.cmlm_cfg, self.data = cfg, cmlm_cfg, data
        self.state = EncoderState.init(enc_cfg, seed=cfg.seed, dtype=dtype)
        self.opt = tc.OptimizerState()
        self.sched = tc.LrSchedule(cfg.warmup_steps, cfg.peak_lr)
        self.metrics_path = metrics_path
        self.metrics = []
        self.step = 0
        srng = np.random.default_rng([cfg.seed, 0x57])
        self.train_streams = {l: make_streams(data.train[l], cfg.stream_len, srng) for l in data.train}
        vrng = np.random.default_rng([cfg.seed, 0x5A])
        self.valid_streams = {l: make_streams(data.valid[l], cfg.stream_len, vrng)[: cfg.valid_streams]
                              for l in data.valid}
        self._cursor = {l: 0 for l in data.train}
        self._order = {l: np.random.default_rng([cfg.seed, 0x0D, l]).permutation(len(s))
                       for l, s in self.train_streams.items()}
        self._epoch = {l: 0 for l in data.train}
        names = {i: n for i, n in enumerate(LANGS)}
        self.priors = {l: static_prior_fn(data.static, names[l], names[1 - l], cmlm_cfg.tau)
                       for l in data.train} if data.static is not None else {}
        self.stopper = StopCriterion(cfg.patience)
        self.best_state = self.state.copy()
        self.best_step = 0

    # -- batching ---------------------------------------------------------
    def _next_streams(self, lang):
        streams = self.train_streams[lang]
        out = []
        for _ in range(self.cfg.batch_size):
            if self._cursor[lang] >= len(streams):
                self._epoch[lang] += 1
                self._cursor[lang] = 0
                self._order[lang] = np.random.default_rng(
                    [self.cfg.seed, 0x0D, lang, self._epoch[lang]]).permutation(len(streams))
            out.append(streams[self._order[lang][self._cursor[lang]]])
            self._cursor[lang] += 1
        return out

    def prepare_batch(self, step):
        """Batch inputs, plans and objective kind for ``step``; pure given (seed, step, cursor)."""
        lang = batch_language(step)
        kind = objective_kind(self.cfg, step)
        rng = np.random.default_rng([self.cfg.seed, step, 0xBA7C])
        raw = self._next_streams(lang)
        inv = self.data.inventories[lang]
        cands = self.data.cands.get(lang)
        switched = (kind == MLM and self.cfg.objectives != "mlm" and cands is not None
                    and rng.random() < self.cmlm_cfg.code_switch_prob)
        plans, inputs = [], []
        for i, s in enumerate(raw):
            exclude = frozenset()
            if switched:
                s, rep = code_switch(s, inv, cands, self.cmlm_cfg, rng, stream_len=self.cfg.stream_len)
                s = np.asarray(s, dtype=np.int64)
                exclude = frozenset(p for st, n in rep for p in range(st, st + n))
            p = plan_masks(s, inv, cands.table if cands is not None else None, kind, self.cmlm_cfg, rng,
                           self.data.vocab_size, stream_id=i, exclude=exclude)
            p.code_switched = switched
            plans.append(p)
            inputs.append(apply_plan(s, p, rng, self.data.vocab_size))
        return StreamBatch(np.stack(inputs), lang), plans, kind

    # -- optimisation -----------------------------------------------------
    def loss_for(self, batch: StreamBatch, plans, kind, train=True, step=0):
        h = encode(self.state, batch.ids, batch.lang, train=train, seed=self.cfg.seed, step=step)
        if kind == CMLM:
            return cmlm_loss(self.state, h, plans, self.data.cands[batch.lang], self.priors[batch.lang],
                             self.cmlm_cfg)
        return mlm_loss(self.state, h, plans)

    def train_step(self):
        step = self.step
        batch, plans, kind = self.prepare_batch(step)
        if len(set(int(batch.lang) for _ in plans)) != 1:
            raise AssertionError("mixed-language batch")
        self.state.zero_grad()
        lr = tc.lr_at(self.sched, step + 1)
        try:
            loss, rep = self.loss_for(batch, plans, kind, train=True, step=step)
            ok = bool(np.isfinite(loss.data))
            if ok:
                loss.backward()
                ok = tc.adam_step(self.opt, self.state.params, self.state.grads(), lr)
        except FloatingPointError as e:
            log.warning("step %d: %s", step, e)
            ok, rep = False, None
        self.step += 1
        rec = {"step": step, "kind": kind, "lang": LANGS[batch.lang], "lr": lr, "ok": ok,
               "l_cmlm": rep.l_cmlm if rep else None, "l_mlm": rep.l_mlm if rep else None,
               "l_pre": rep.l_pre if rep else None, "tokens": rep.masked_tokens if rep else 0,
               "code_switched": bool(plans and plans[0].code_switched)}
        self._log(rec)
        return ok, rec

    def _log(self, rec):
        self.metrics.append(rec)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def evaluate(self, round_seed=None):
        seed = self.cfg.seed if round_seed is None else round_seed
        return {l: eval_perplexity(self.state, self.valid_streams[l], l, self.data.inventories[l],
                                   self.cmlm_cfg, seed=seed)
                for l in self.valid_streams}

    def run(self):
        ppl0 = self.evaluate()
        self.stopper.update(ppl0)
        self._log({"step": 0, "kind": "eval", "ppl": {LANGS[k]: v for k, v in ppl0.items()},
                   "avg_ppl": self.stopper.history[-1]})
        bad_run = 0
        while self.step < self.cfg.max_steps:
            ok, _ = self.train_step()
            bad_run = 0 if ok else bad_run + 1
            if bad_run >= self.cfg.max_bad_steps:
                raise RuntimeError(f"aborting: {bad_run} consecutive non-finite steps")
            if self.step % self.cfg.eval_every == 0 or self.step == self.cfg.max_steps:
                ppl = self.evaluate()
                prev_best = self.stopper.best
                stop = self.stopper.update(ppl)
                if self.stopper.best < prev_best:
                    self.best_state = self.state.copy()
                    self.best_step = self.step
                self._log({"step": self.step, "kind": "eval", "ppl": {LANGS[k]: v for k, v in ppl.items()},
                           "avg_ppl": self.stopper.history[-1]})
                if stop:
                    break
        return self.best_state


def train(enc_cfg, cfg, data, cmlm_cfg=CmlmConfig(), dtype=np.float32, metrics_path=None, checkpoint=None,
          vocab_hash=""):
    t = Trainer(enc_cfg, cfg, data, cmlm_cfg, dtype=dtype, metrics_path=metrics_path)
    best = t.run()
    if checkpoint is not None:
        best.save(checkpoint, vocab_hash=vocab_hash, step=t.best_step)
    return best, t
