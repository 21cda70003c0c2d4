"""Pre-norm transformer encoder with tied input/output token embeddings."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor
from .textpipe import PAD

_MASK_NEG = -1e9
CKPT_MAGIC = "cmlm-checkpoint-v1"


@dataclass
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    dim: int = 128
    heads: int = 4
    ffn: int = 512
    max_len: int = 128
    dropout: float = 0.1
    n_langs: int = 2
    init_std: float = 0.02

    def validate(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.vocab_size < 1 or self.layers < 0:
            raise ValueError("bad vocab_size or layers")


# reference sizes from the full-scale setting; not trainable on a laptop
FULL_SCALE = dict(layers=6, dim=1024, heads=8, ffn=4096, max_len=256, dropout=0.1)


class EncoderState:
    """All trainable tensors of the encoder, keyed by name."""

    def __init__(self, cfg: EncoderConfig, params: dict):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: EncoderConfig, seed=0, dtype=tc.DEFAULT_DTYPE):
        cfg.validate()
        rng = np.random.default_rng(seed)
        D, F = cfg.dim, cfg.ffn

        def normal(*shape):
            return Tensor(rng.normal(0.0, cfg.init_std, size=shape).astype(dtype), requires_grad=True)

        def const(v, *shape):
            return Tensor(np.full(shape, v, dtype=dtype), requires_grad=True)

        p = {
            "tok_emb": normal(cfg.vocab_size, D),
            "pos_emb": normal(cfg.max_len, D),
            "lang_emb": normal(cfg.n_langs, D),
        }
        for l in range(cfg.layers):
            p[f"l{l}.ln1.g"], p[f"l{l}.ln1.b"] = const(1.0, D), const(0.0, D)
            p[f"l{l}.qkv.w"], p[f"l{l}.qkv.b"] = normal(D, 3 * D), const(0.0, 3 * D)
            p[f"l{l}.out.w"], p[f"l{l}.out.b"] = normal(D, D), const(0.0, D)
            p[f"l{l}.ln2.g"], p[f"l{l}.ln2.b"] = const(1.0, D), const(0.0, D)
            p[f"l{l}.ff1.w"], p[f"l{l}.ff1.b"] = normal(D, F), const(0.0, F)
            p[f"l{l}.ff2.w"], p[f"l{l}.ff2.b"] = normal(F, D), const(0.0, D)
        p["ln_f.g"], p["ln_f.b"] = const(1.0, D), const(0.0, D)
        p["out_bias"] = const(0.0, cfg.vocab_size)
        for k, t in p.items():
            t.name = k
        return cls(cfg, p)

    def astype(self, dtype):
        return EncoderState(self.cfg, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                                       for k, v in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        return {k: t.grad for k, t in self.params.items()}

    def num_parameters(self):
        return sum(t.data.size for t in self.params.values())

    def save(self, path, vocab_hash="", step=0):
        names = list(self.params)
        header = {
            "format": CKPT_MAGIC,
            "config": asdict(self.cfg),
            "vocab_hash": vocab_hash,
            "step": int(step),
            "arrays": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        with open(path, "wb") as f:
            f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            for n in names:
                f.write(np.ascontiguousarray(self.params[n].data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        if header.get("format") != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        off = nl + 1
        params = {}
        for spec in header["arrays"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(spec["shape"]).astype(np.float32)
            off += 4 * n
            params[spec["name"]] = Tensor(arr, requires_grad=True, name=spec["name"])
        state = cls(EncoderConfig(**header["config"]), params)
        return state, header


def _attention(x, mask_add, p, l, cfg, train, seed, step):
    B, T, D = x.shape
    H = cfg.heads
    dh = D // H
    qkv = tc.matmul(x, p[f"l{l}.qkv.w"]) + p[f"l{l}.qkv.b"]
    qkv = tc.transpose(tc.reshape(qkv, (B, T, 3 * H, dh)), (0, 2, 1, 3))  # B, 3H, T, dh
    q, k, v = qkv[:, :H], qkv[:, H : 2 * H], qkv[:, 2 * H :]
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = tc.softmax(scores + mask_add, axis=-1)
    ctx = tc.matmul(probs, v)  # B, H, T, dh
    ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    out = tc.matmul(ctx, p[f"l{l}.out.w"]) + p[f"l{l}.out.b"]
    return tc.dropout(out, cfg.dropout, seed, step, 10 * l + 1, train)


def encode(state: EncoderState, ids, lang, positions=None, train=False, seed=0, step=0) -> Tensor:
    """Top-layer hidden states, shape (B, T, dim). PAD keys are masked out of attention."""
    cfg, p = state.cfg, state.params
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValueError(f"stream length {T} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if positions is None:
        positions = np.broadcast_to(np.arange(T), (B, T))
    lang = np.broadcast_to(np.asarray(lang, dtype=np.int64), (B,))
    dtype = state.dtype
    mask_add = Tensor(np.where(ids == PAD, _MASK_NEG, 0.0).astype(dtype)[:, None, None, :])

    h = tc.embedding(p["tok_emb"], ids) + tc.embedding(p["pos_emb"], positions)
    h = h + tc.reshape(tc.embedding(p["lang_emb"], lang), (B, 1, cfg.dim))
    h = tc.dropout(h, cfg.dropout, seed, step, 0, train)
    for l in range(cfg.layers):
        a = tc.layer_norm(h, p[f"l{l}.ln1.g"], p[f"l{l}.ln1.b"])
        h = h + _attention(a, mask_add, p, l, cfg, train, seed, step)
        f = tc.layer_norm(h, p[f"l{l}.ln2.g"], p[f"l{l}.ln2.b"])
        f = tc.gelu(tc.matmul(f, p[f"l{l}.ff1.w"]) + p[f"l{l}.ff1.b"])
        f = tc.matmul(f, p[f"l{l}.ff2.w"]) + p[f"l{l}.ff2.b"]
        h = h + tc.dropout(f, cfg.dropout, seed, step, 10 * l + 2, train)
    return tc.layer_norm(h, p["ln_f.g"], p["ln_f.b"])


def token_logprobs(state: EncoderState, states: Tensor, positions) -> Tensor:
    """Log-softmax over the vocabulary at the given positions.

    ``positions`` indexes the flattened (B*T) axis, or is a list of (b, t) pairs.
    """
    pos = np.asarray(positions, dtype=np.int64)
    flat = tc.reshape(states, (-1, states.shape[-1])) if states.ndim == 3 else states
    if pos.ndim == 2:
        pos = pos[:, 0] * states.shape[1] + pos[:, 1]
    rows = tc.take(flat, pos)
    logits = tc.matmul(rows, tc.transpose(state.params["tok_emb"], (1, 0))) + state.params["out_bias"]
    return tc.log_softmax(logits, axis=-1)
