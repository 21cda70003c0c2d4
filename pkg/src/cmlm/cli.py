"""Command-line driver: one subcommand per pipeline stage plus ``pipeline`` for all of them.

Every stage reads its inputs from and writes its outputs to the work
directory, and each output gets a ``.prov.json`` sidecar.

Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 stage failure.
"""
from __future__ import annotations

import argparse
import datetime
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .config import ConfigInvalid, dump_config, load_config
from .diagnostics import cmlm_grad_check
from .embed import EmbeddingMatrix, train_sgns
from .encoder import EncoderState
from .evalsuite import align_words, align_words_static, evaluate_alignment, table_precision
from .pipeline import MapArtifacts, TextArtifacts, build_static, embedding_corpus, training_data
from .textpipe import (MergeTable, NGramInventory, Vocabulary, build_vocab, extract_ngrams, gen_cipher_corpus,
                       learn_bpe, load_cipher_corpus, save_cipher_corpus, tokenize_corpus, write_alignments)
from .trainloop import train
from .xmap import MappingMatrix, ScorerConfig, TranslationTable, anchor_pairs, infer_table, preprocess, self_learning

log = logging.getLogger("cmlm")

LANGS = ("x", "y")
GRAD_TOL = 1e-3


class StageError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- work directory ---------------------------------------------------------


class Workdir:
    def __init__(self, root, cfg):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.root / name

    def need(self, name):
        p = self.path(name)
        if not p.exists():
            raise StageError(f"missing input {p}; run the earlier stage first")
        return p

    def provenance(self, name, stage):
        sidecar = {
            "artifact": name,
            "stage": stage,
            "config_hash": self.cfg.digest(),
            "seed": self.cfg.seed,
            "tool_version": __version__,
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        }
        with open(self.path(name + ".prov.json"), "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=1, sort_keys=True)

    def vocab(self):
        return Vocabulary.load(self.need("vocab.txt"))

    def tokens(self, lang, vocab):
        with open(self.need(f"tok.{lang}"), encoding="utf-8") as f:
            return [[vocab.id(t) for t in line.split()] for line in f]

    def inventory(self, lang, vocab):
        return NGramInventory.load(self.need(f"ngrams.{lang}"), vocab)

    def mapping(self):
        embs = {l: EmbeddingMatrix.load(self.need(f"emb.{l}.vec"), lang=l) for l in LANGS}
        W = MappingMatrix.load(self.need("mapping.txt"))
        return MapArtifacts(W, preprocess(embs["x"]), preprocess(embs["y"]), [])


# -- stages -------------------------------------------------------------------


def stage_gen_corpus(wd: Workdir, args):
    cc = gen_cipher_corpus(wd.cfg.cipher_spec())
    save_cipher_corpus(cc, wd.path("corpus"))
    for name in ("train.x", "train.y", "eval.x", "eval.y", "eval.gold", "lexicon.tsv"):
        wd.provenance(f"corpus/{name}", "gen-corpus")
    print(f"corpus: {len(cc.corpus_x)} sentences per language, {len(cc.parallel_eval)} eval pairs")


def stage_learn_bpe(wd: Workdir, args):
    cc = load_cipher_corpus(wd.need("corpus"))
    merges = learn_bpe([cc.corpus_x, cc.corpus_y], wd.cfg.bpe.num_merges)
    merges.save(wd.path("bpe.codes"))
    wd.provenance("bpe.codes", "learn-bpe")
    print(f"bpe: {len(merges)} merges")


def stage_apply_bpe(wd: Workdir, args):
    cc = load_cipher_corpus(wd.need("corpus"))
    merges = MergeTable.load(wd.need("bpe.codes"))
    vocab = build_vocab([cc.corpus_x, cc.corpus_y], merges)
    vocab.save(wd.path("vocab.txt"))
    wd.provenance("vocab.txt", "apply-bpe")
    for lang, corpus in (("x", cc.corpus_x), ("y", cc.corpus_y)):
        toks = tokenize_corpus(corpus, merges, vocab)
        with open(wd.path(f"tok.{lang}"), "w", encoding="utf-8") as f:
            for s in toks:
                f.write(" ".join(vocab.tokens[i] for i in s) + "\n")
        wd.provenance(f"tok.{lang}", "apply-bpe")
    print(f"vocab: {len(vocab)} entries")


def stage_extract_ngrams(wd: Workdir, args):
    vocab = wd.vocab()
    g = wd.cfg.ngrams
    for lang in LANGS:
        inv = extract_ngrams(wd.tokens(lang, vocab), vocab, g.n_max, g.min_count, g.top_m, lang=lang)
        inv.save(wd.path(f"ngrams.{lang}"))
        wd.provenance(f"ngrams.{lang}", "extract-ngrams")
        print(f"ngrams.{lang}: {len(inv)} entries")


def stage_train_embed(wd: Workdir, args):
    vocab = wd.vocab()
    for lang in LANGS:
        corpus = embedding_corpus(wd.tokens(lang, vocab), wd.inventory(lang, vocab), vocab)
        emb, losses = train_sgns(corpus, wd.cfg.sgns(), lang=lang, return_losses=True)
        emb.save(wd.path(f"emb.{lang}.vec"))
        wd.provenance(f"emb.{lang}.vec", "train-embed")
        print(f"emb.{lang}: {len(emb)} units, epoch losses " + " ".join(f"{v:.4f}" for v in losses))


def stage_map_embed(wd: Workdir, args):
    cc = load_cipher_corpus(wd.need("corpus"))
    px, py = (preprocess(EmbeddingMatrix.load(wd.need(f"emb.{l}.vec"), lang=l)) for l in LANGS)
    seed = anchor_pairs(px, py, cc.gold.anchors)
    m = wd.cfg.map
    W = self_learning(px, py, seed, rounds=m.rounds, top_f=m.top_f, csls_k=m.csls_k)
    W.save(wd.path("mapping.txt"))
    wd.provenance("mapping.txt", "map-embed")
    print(f"mapping: {len(seed)} seed pairs, orthogonality error {W.orthogonality_error():.2e}")


def stage_infer_table(wd: Workdir, args):
    vocab = wd.vocab()
    m = wd.mapping()
    inv = {l: wd.inventory(l, vocab) for l in LANGS}
    t = wd.cfg.table
    scorer = ScorerConfig(n=t.n)
    xy = infer_table(inv["x"], inv["y"], m.src, m.tgt, k=t.k, cfg=scorer, W_src=m.W, direction="x->y")
    yx = infer_table(inv["y"], inv["x"], m.tgt, m.src, k=t.k, cfg=scorer, W_tgt=m.W, direction="y->x")
    for name, tab in (("table.x-y.tsv", xy), ("table.y-x.tsv", yx)):
        tab.save(wd.path(name))
        wd.provenance(name, "infer-table")
        print(f"{name}: {len(tab)} sources")


def stage_pretrain(wd: Workdir, args):
    vocab = wd.vocab()
    text = TextArtifacts(None, None, vocab, {l: wd.tokens(l, vocab) for l in LANGS},
                         {l: wd.inventory(l, vocab) for l in LANGS})
    p = wd.cfg.pretrain
    tables = None
    static = None
    if p.objectives != "mlm":
        tables = {"x": TranslationTable.load(wd.need("table.x-y.tsv")),
                  "y": TranslationTable.load(wd.need("table.y-x.tsv"))}
        static = build_static(vocab, wd.mapping())
    seed = wd.cfg.seed
    data = training_data(text, tables, static, k=p.candidates, seed=seed)
    enc = wd.cfg.encoder(len(vocab))
    tcfg = wd.cfg.training()
    metrics = wd.path("metrics.jsonl")
    metrics.unlink(missing_ok=True)
    best, trainer = train(enc, tcfg, data, wd.cfg.cmlm(), metrics_path=metrics, checkpoint=wd.path("encoder.ckpt"),
                          vocab_hash=vocab.digest())
    for name in ("encoder.ckpt", "metrics.jsonl"):
        wd.provenance(name, "pretrain")
    hist = trainer.stopper.history
    print(f"pretrain: {trainer.step} steps, avg perplexity {hist[0]:.2f} -> {min(hist):.2f} "
          f"(best at step {trainer.best_step})")


def stage_eval_align(wd: Workdir, args):
    cc = load_cipher_corpus(wd.need("corpus"))
    merges = MergeTable.load(wd.need("bpe.codes"))
    vocab = wd.vocab()
    if args.static:
        static = build_static(vocab, wd.mapping())
        aligner = lambda x, y: align_words_static(x, y, merges, vocab, static, return_views=True)  # noqa: E731
        tag = "static"
    else:
        state, header = EncoderState.load(wd.need("encoder.ckpt"))
        if header["vocab_hash"] != vocab.digest():
            raise StageError("checkpoint was trained with a different vocabulary")
        aligner = lambda x, y: align_words(state, x, y, merges, vocab, return_views=True)  # noqa: E731
        tag = "encoder"
    preds = []

    def record(x, y):
        out = aligner(x, y)
        preds.append(out[0])
        return out

    rep = evaluate_alignment(cc.parallel_eval, record)
    write_alignments(wd.path(f"align.{tag}.pred"), preds)
    with open(wd.path(f"align.{tag}.json"), "w", encoding="utf-8") as f:
        json.dump(rep.__dict__, f, indent=1)
    for name in (f"align.{tag}.pred", f"align.{tag}.json"):
        wd.provenance(name, "eval-align")
    print(f"{tag}: {rep.format()}")


def stage_eval_table(wd: Workdir, args):
    cc = load_cipher_corpus(wd.need("corpus"))
    report = {}
    for name, reverse in (("table.x-y.tsv", False), ("table.y-x.tsv", True)):
        tab = TranslationTable.load(wd.need(name))
        res = table_precision(tab, cc.gold, at_k=wd.cfg.eval.at_k, reverse=reverse)
        report[name] = {"precision": res.precision, "sources": res.n_sources,
                        "per_order": {str(o): {"precision": p, "sources": n} for o, (p, n) in res.per_order.items()}}
        if res.empty:
            print(f"{name}: no scorable sources")
        for o, (p, n) in res.per_order.items():
            print(f"{name} order {o}: precision@{wd.cfg.eval.at_k} {p:.4f} over {n} sources")
    with open(wd.path("table.report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1)
    wd.provenance("table.report.json", "eval-table")


def stage_grad_check(wd: Workdir | None, args):
    rep = cmlm_grad_check(coords_per_param=args.coords, seed=args.seed_override or 0)
    print(rep.format())
    if not rep.max_rel_error <= GRAD_TOL:
        raise StageError(f"max relative error {rep.max_rel_error:.3e} exceeds {GRAD_TOL:g}")


STAGES = {
    "gen-corpus": (stage_gen_corpus, "generate the synthetic cipher corpus and gold lexicon"),
    "learn-bpe": (stage_learn_bpe, "learn BPE merges on both languages"),
    "apply-bpe": (stage_apply_bpe, "build the vocabulary and tokenize both corpora"),
    "extract-ngrams": (stage_extract_ngrams, "collect frequent n-gram inventories"),
    "train-embed": (stage_train_embed, "train skip-gram embeddings over tokens and n-grams"),
    "map-embed": (stage_map_embed, "learn the orthogonal cross-lingual mapping"),
    "infer-table": (stage_infer_table, "score n-gram translation candidates in both directions"),
    "pretrain": (stage_pretrain, "pre-train the encoder with alternating MLM and CMLM"),
    "eval-align": (stage_eval_align, "align the parallel eval set and report AER"),
    "eval-table": (stage_eval_table, "score translation tables against the gold lexicon"),
}
PIPELINE = ["gen-corpus", "learn-bpe", "apply-bpe", "extract-ngrams", "train-embed", "map-embed", "infer-table",
            "pretrain", "eval-align", "eval-table"]


def build_parser():
    ap = _Parser(prog="cmlm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="INI configuration file")
    common.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("-w", "--workdir", help="work directory (default: global.workdir)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in STAGES.items():
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        if name == "eval-align":
            p.add_argument("--static", action="store_true", help="evaluate the static-embedding baseline")
    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    p.add_argument("--with-baseline", action="store_true", help="also evaluate the static-embedding baseline")
    p = sub.add_parser("grad-check", help="check CMLM gradients of a 2-layer float64 encoder")
    p.add_argument("--coords", type=int, default=6, help="random coordinates probed per tensor")
    p.add_argument("--seed", dest="seed_override", type=int, default=0)
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "grad-check":
        try:
            stage_grad_check(None, args)
        except StageError as e:
            print(f"stage grad-check failed: {e}", file=sys.stderr)
            return 3
        return 0
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigInvalid as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        print(dump_config(cfg))
        return 0
    wd = Workdir(args.workdir or cfg.sections["global"].workdir, cfg)
    (wd.path("config.ini")).write_text(dump_config(cfg), encoding="utf-8")
    names = PIPELINE if args.command == "pipeline" else [args.command]
    if args.command == "pipeline":
        args.static = False
    for name in names:
        try:
            STAGES[name][0](wd, args)
            if name == "eval-align" and getattr(args, "with_baseline", False):
                args.static = True
                STAGES[name][0](wd, args)
                args.static = False
        except (StageError, OSError, ValueError, FloatingPointError, RuntimeError) as e:
            print(f"stage {name} failed: {e}", file=sys.stderr)
            return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
