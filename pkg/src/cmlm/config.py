"""INI-style pipeline configuration with typed sections and presets."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .embed import SgnsConfig
from .encoder import EncoderConfig
from .objective import CmlmConfig
from .textpipe import CipherSpec, default_anchor_tokens
from .trainloop import TrainConfig


class ConfigInvalid(ValueError):
    pass


@dataclass
class GlobalSection:
    seed: int = 1234
    preset: str = "desk"
    workdir: str = "work"


@dataclass
class CorpusSection:
    base_vocab_size: int = 1000
    zipf_exponent: float = 1.0
    markov_order: int = 1
    swap_prob: float = 0.1
    num_anchors: int = 64
    num_sentences: int = 20000
    min_length: int = 6
    max_length: int = 16
    num_eval_sentences: int = 200
    successors: int = 16
    background: float = 0.2


@dataclass
class BpeSection:
    num_merges: int = 4000


@dataclass
class NgramSection:
    n_max: int = 3
    min_count: int = 5
    top_m: int = 2000


@dataclass
class EmbedSection:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    subsample: float = 1e-3
    workers: int = 1


@dataclass
class MapSection:
    rounds: int = 20
    top_f: int = 2000
    csls_k: int = 10


@dataclass
class TableSection:
    k: int = 5
    n: int = 5


@dataclass
class PretrainSection:
    layers: int = 4
    dim: int = 128
    heads: int = 4
    ffn: int = 512
    max_len: int = 128
    dropout: float = 0.1
    stream_len: int = 128
    batch_size: int = 16
    max_steps: int = 20000
    eval_every: int = 500
    patience: int = 5
    peak_lr: float = 5e-4
    warmup_steps: int = 1000
    objectives: str = "cmlm+mlm"
    candidates: int = 5
    tau: float = 1.0
    code_switch_rate: float = 0.15


@dataclass
class EvalSection:
    at_k: int = 1


SECTIONS = {
    "global": GlobalSection,
    "corpus": CorpusSection,
    "bpe": BpeSection,
    "ngrams": NgramSection,
    "embed": EmbedSection,
    "map": MapSection,
    "table": TableSection,
    "pretrain": PretrainSection,
    "eval": EvalSection,
}

PRESETS = {
    "desk": {},
    "fixture": {"pretrain": dict(layers=2, dim=64, heads=4, ffn=256, max_len=64, stream_len=64, batch_size=16,
                                 max_steps=2000, peak_lr=2e-3, warmup_steps=500, candidates=1)},
    "full": {"pretrain": dict(layers=6, dim=1024, heads=8, ffn=4096, max_len=256, stream_len=256, batch_size=64)},
}


@dataclass
class PipelineConfig:
    sections: dict = field(default_factory=lambda: {k: cls() for k, cls in SECTIONS.items()})

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    def as_dict(self):
        return {k: asdict(v) for k, v in self.sections.items()}

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    # typed views used by the stages
    def cipher_spec(self):
        c = self.corpus
        return CipherSpec(base_vocab_size=c.base_vocab_size, zipf_exponent=c.zipf_exponent,
                          markov_order=c.markov_order, swap_prob=c.swap_prob,
                          shared_anchor_tokens=default_anchor_tokens(c.num_anchors), seed=self.seed,
                          num_sentences=c.num_sentences, sentence_length_range=(c.min_length, c.max_length),
                          num_eval_sentences=c.num_eval_sentences, successors=c.successors,
                          background=c.background)

    @property
    def seed(self):
        return self.sections["global"].seed

    def sgns(self):
        e = self.embed
        return SgnsConfig(dim=e.dim, window=e.window, negatives=e.negatives, epochs=e.epochs, lr=e.lr,
                          subsample=e.subsample, seed=self.seed + 11, workers=e.workers)

    def cmlm(self):
        p = self.pretrain
        return CmlmConfig(k=p.candidates, tau=p.tau, code_switch_rate=p.code_switch_rate)

    def encoder(self, vocab_size):
        p = self.pretrain
        return EncoderConfig(vocab_size=vocab_size, layers=p.layers, dim=p.dim, heads=p.heads, ffn=p.ffn,
                             max_len=p.max_len, dropout=p.dropout)

    def training(self, objectives=None):
        p = self.pretrain
        return TrainConfig(stream_len=p.stream_len, batch_size=p.batch_size, max_steps=p.max_steps,
                           eval_every=p.eval_every, patience=p.patience, peak_lr=p.peak_lr,
                           warmup_steps=p.warmup_steps, seed=self.seed, objectives=objectives or p.objectives)


def _coerce(raw: str, default, where):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigInvalid(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _assign(cfg: PipelineConfig, section, key, raw):
    if section not in cfg.sections:
        raise ConfigInvalid(f"unknown section [{section}]")
    obj = cfg.sections[section]
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigInvalid(f"unknown key {section}.{key}")
    setattr(obj, key, _coerce(str(raw), getattr(obj, key), f"{section}.{key}"))


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Read an INI file (optional), apply the preset, then dotted ``section.key=value`` overrides."""
    cfg = PipelineConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except (OSError, configparser.Error) as e:
            raise ConfigInvalid(f"cannot read config {path}: {e}") from None
    items = [(s, k, v) for s in parser.sections() for k, v in parser.items(s)]
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigInvalid(f"override {ov!r} is not section.key=value")
        lhs, v = ov.split("=", 1)
        s, k = lhs.split(".", 1)
        items.append((s, k, v))
    # preset first so that explicit settings win
    for s, k, v in items:
        if (s, k) == ("global", "preset"):
            _assign(cfg, s, k, v)
    preset = cfg.sections["global"].preset
    if preset not in PRESETS:
        raise ConfigInvalid(f"unknown preset {preset!r}")
    for s, kv in PRESETS[preset].items():
        for k, v in kv.items():
            setattr(cfg.sections[s], k, v)
    for s, k, v in items:
        _assign(cfg, s, k, v)
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig):
    try:
        cfg.cipher_spec().validate()
        cfg.sgns().validate()
        cfg.cmlm().validate()
    except ValueError as e:
        raise ConfigInvalid(str(e)) from None
    p = cfg.pretrain
    if p.dim % p.heads:
        raise ConfigInvalid("pretrain.dim must be divisible by pretrain.heads")
    if p.stream_len > p.max_len:
        raise ConfigInvalid("pretrain.stream_len exceeds pretrain.max_len")
    if p.objectives not in ("cmlm+mlm", "mlm", "cmlm"):
        raise ConfigInvalid(f"pretrain.objectives: unknown value {p.objectives!r}")


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for s, d in cfg.as_dict().items():
        lines.append(f"[{s}]")
        lines += [f"{k} = {v}" for k, v in d.items()]
        lines.append("")
    return "\n".join(lines)
