import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlm.textpipe import (CONT, JOINER, MASK, PAD, SPECIALS, UNK, CipherSpec, ConfigError, GoldLexicon,
                           MergeTable, NGramInventory, Vocabulary, apply_bpe, build_vocab, detokenize,
                           extract_ngrams, gen_cipher_corpus, learn_bpe, load_cipher_corpus, read_alignments,
                           save_cipher_corpus, tokenize_corpus, write_alignments)


# -- cipher corpus ----------------------------------------------------------


def test_generation_is_deterministic():
    spec = CipherSpec(base_vocab_size=200, num_sentences=300, num_eval_sentences=10, seed=3)
    a, b = gen_cipher_corpus(spec), gen_cipher_corpus(spec)
    assert a.corpus_x == b.corpus_x and a.corpus_y == b.corpus_y
    assert [p.links for p in a.parallel_eval] == [p.links for p in b.parallel_eval]


def test_no_swaps_gives_identity_alignments():
    cc = gen_cipher_corpus(CipherSpec(base_vocab_size=200, num_sentences=50, num_eval_sentences=40, swap_prob=0.0))
    for p in cc.parallel_eval:
        assert p.links == [(i, i) for i in range(1, len(p.x) + 1)]
        assert cc.gold.encipher(p.x) == p.y


def test_eval_links_decode_the_cipher():
    cc = gen_cipher_corpus(CipherSpec(base_vocab_size=200, num_sentences=50, num_eval_sentences=40, swap_prob=0.5))
    for p in cc.parallel_eval:
        assert sorted(i for i, _ in p.links) == list(range(1, len(p.x) + 1))
        for i, j in p.links:
            assert cc.gold.mapping[p.x[i - 1]] == p.y[j - 1]


def test_lexicon_is_bijection_with_fixed_anchors():
    cc = gen_cipher_corpus(CipherSpec(base_vocab_size=300, num_sentences=10, num_eval_sentences=0))
    g = cc.gold
    assert len(set(g.mapping.values())) == len(g.mapping) == 300
    assert all(g.mapping[a] == a for a in g.anchors)
    assert len(g.anchors) == 64


def _slope(freqs, lo, hi):
    # ordinary least squares of log f on log r, written out by hand
    xs = [math.log(r) for r in range(lo, hi + 1)]
    ys = [math.log(freqs[r - 1]) for r in range(lo, hi + 1)]
    mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
    num = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    den = sum((x - mx) ** 2 for x in xs)
    return num / den


def test_rank_frequency_slope_is_zipfian():
    cc = gen_cipher_corpus(CipherSpec(base_vocab_size=1000, zipf_exponent=1.0, num_sentences=50000,
                                      num_eval_sentences=0))
    freqs = sorted(Counter(w for s in cc.corpus_x for w in s).values(), reverse=True)
    slope = _slope(freqs, 10, 300)
    assert -1.2 <= slope <= -0.8, slope


@pytest.mark.parametrize("change", [dict(swap_prob=1.5), dict(base_vocab_size=1), dict(sentence_length_range=(5, 2)),
                                    dict(markov_order=0), dict(shared_anchor_tokens=["a", "a"])])
def test_invalid_spec_is_rejected(change):
    with pytest.raises(ConfigError):
        gen_cipher_corpus(CipherSpec(num_sentences=5, **change))


def test_corpus_files_round_trip(tmp_path):
    cc = gen_cipher_corpus(CipherSpec(base_vocab_size=150, num_sentences=40, num_eval_sentences=5))
    back = load_cipher_corpus(save_cipher_corpus(cc, tmp_path))
    assert back.corpus_x == cc.corpus_x and back.corpus_y == cc.corpus_y
    assert back.gold.mapping == cc.gold.mapping and back.gold.anchors == cc.gold.anchors
    assert [(p.x, p.y, p.links) for p in back.parallel_eval] == [(p.x, p.y, p.links) for p in cc.parallel_eval]


def test_alignment_file_format(tmp_path):
    write_alignments(tmp_path / "a", [[(2, 1), (1, 2)], []])
    assert (tmp_path / "a").read_text() == "1-2 2-1\n\n"
    assert read_alignments(tmp_path / "a") == [[(1, 2), (2, 1)], []]


# -- BPE ------------------------------------------------------------------


def reference_bpe(word_counts, num_merges):
    """Greedy BPE with a full pair recount every iteration; ties go to the smallest pair."""
    vocab = {tuple(w): c for w, c in word_counts.items()}
    merges = []
    for _ in range(num_merges):
        pairs = Counter()
        for syms, c in vocab.items():
            for i in range(len(syms) - 1):
                pairs[syms[i], syms[i + 1]] += c
        if not pairs:
            break
        best = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == best)
        merges.append(pair)
        new = {}
        for syms, c in vocab.items():
            out, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == pair:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            new[tuple(out)] = new.get(tuple(out), 0) + c
        vocab = new
    return merges


def test_first_merge_is_most_frequent_pair():
    assert learn_bpe([[["aa", "aa", "ab"]]], 1).merges == [("a", "a")]


def test_zero_merges_splits_into_characters():
    t = learn_bpe([[["abc", "d"]]], 0)
    assert t.segment("abc") == ["a@@", "b@@", "c"]
    assert t.segment("d") == ["d"]


def test_toy_corpus_matches_reference_learner():
    words = ["lower", "lowest", "newer", "wider", "low", "new", "newest", "wide", "slow", "slower",
             "snow", "know", "known", "owner", "lowered", "renew", "sew", "sewer", "ewe", "we"]
    corpus = [[w] * (1 + i % 4) for i, w in enumerate(words)]
    counts = Counter(w for s in corpus for w in s)
    assert learn_bpe([corpus], 10).merges == reference_bpe(counts, 10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(alphabet="abcd", min_size=1, max_size=7), min_size=1, max_size=25), st.integers(0, 30))
def test_learner_matches_reference_on_random_counts(words, n):
    counts = Counter(words)
    assert learn_bpe([[words]], n).merges == reference_bpe(counts, n)


def test_hand_applied_merge():
    t = MergeTable([("a", "a")])
    v = Vocabulary.build(Counter(["aa@@", "b"]))
    enc = apply_bpe(["aab"], t, v)
    assert v.lookup(enc.ids) == ["aa@@", "b"]


def test_fully_merged_word_is_one_token():
    t = learn_bpe([[["hello"] * 3]], 10)
    assert t.segment("hello") == ["hello"]
    assert not t.segment("hello")[0].endswith(CONT)


def test_apply_is_deterministic_and_unknown_maps_to_unk():
    t = learn_bpe([[["abab", "ba"]]], 2)
    v = build_vocab([[["abab", "ba"]]], t)
    a = apply_bpe(["abab", "ba", "zz"], t, v)
    b = apply_bpe(["abab", "ba", "zz"], t, v)
    assert a == b
    assert UNK in a.ids


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.text(alphabet="xyzw", min_size=1, max_size=6), min_size=1, max_size=6), min_size=1,
                max_size=8), st.integers(0, 15))
def test_segmentation_round_trips(corpus, n):
    t = learn_bpe([corpus], n)
    for sent in corpus:
        toks = [tok for w in sent for tok in t.segment(w)]
        assert detokenize(toks) == sent


def test_vocabulary_layout_and_files(tmp_path):
    v = Vocabulary.build(Counter({"b": 2, "a": 2, "c": 5}))
    assert v.tokens[: len(SPECIALS)] == list(SPECIALS)
    assert v.id("<pad>") == PAD == 0 and MASK == v.index[SPECIALS[MASK]]
    assert v.tokens[len(SPECIALS):] == ["c", "a", "b"]
    v.save(tmp_path / "v")
    w = Vocabulary.load(tmp_path / "v")
    assert w.tokens == v.tokens and w.freqs == v.freqs and w.digest() == v.digest()


def test_merge_table_round_trip(tmp_path):
    t = learn_bpe([[["banana", "bandana"]]], 5)
    t.save(tmp_path / "codes")
    assert MergeTable.load(tmp_path / "codes").merges == t.merges


# -- n-grams --------------------------------------------------------------


def _vocab(n):
    return Vocabulary.build(Counter({f"t{i}": n - i for i in range(n)}))


def test_empty_corpus_gives_empty_inventory():
    assert len(extract_ngrams([], _vocab(3))) == 0


def test_window_counts_by_hand():
    v = _vocab(2)
    a, b = v.id("t0"), v.id("t1")
    inv = extract_ngrams([[a, b, a, b]], v, n_max=2, min_count=1)
    assert inv.entries[f"t0{JOINER}t1"].freq == 2
    assert inv.entries[f"t1{JOINER}t0"].freq == 1
    assert inv.entries["t0"].freq == 2


def test_min_count_above_corpus_length_gives_empty():
    v = _vocab(3)
    corpus = [[5, 6, 7], [5, 6]]
    assert len(extract_ngrams(corpus, v, min_count=6)) == 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(5, 9), max_size=9), max_size=12), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 6))
def test_inventory_counts_match_exhaustive_recount(corpus, n_max, min_count, top_m):
    v = _vocab(5)
    inv = extract_ngrams(corpus, v, n_max=n_max, min_count=min_count, top_m=top_m)
    per_order = Counter()
    for key, g in inv.entries.items():
        n = len(g.ids)
        per_order[n] += 1
        brute = sum(1 for s in corpus for i in range(len(s) - n + 1) if tuple(s[i:i + n]) == g.ids)
        assert g.freq == brute >= min_count
        assert 1 <= n <= n_max
    assert all(c <= top_m for c in per_order.values())


def test_inventory_file_round_trip(tmp_path, small_text):
    inv = small_text.inventories["x"]
    inv.save(tmp_path / "ng")
    back = NGramInventory.load(tmp_path / "ng", small_text.vocab)
    assert back.entries == inv.entries and back.n_max == inv.n_max and back.top_m == inv.top_m


def test_tokenized_corpus_reproduces_words(small_text):
    cc = small_text.cipher
    for sent, ids in zip(cc.corpus_y[:200], small_text.tokens["y"][:200]):
        assert detokenize(small_text.vocab.lookup(ids)) == sent


def test_gold_lexicon_file_round_trip(tmp_path):
    g = GoldLexicon({"a": "α", "1": "1"}, frozenset({"1"}))
    g.save(tmp_path / "lex")
    back = GoldLexicon.load(tmp_path / "lex")
    assert back.mapping == g.mapping and back.anchors == g.anchors


def test_tokenize_corpus_uses_apply_bpe(small_text):
    sents = small_text.cipher.corpus_x[:5]
    assert tokenize_corpus(sents, small_text.merges, small_text.vocab) == small_text.tokens["x"][:5]
    assert np.all([t >= len(SPECIALS) for s in small_text.tokens["x"] for t in s])
