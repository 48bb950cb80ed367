from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adapterlab.corpora import (BIO_TAGS, PAIR_LABELS, PAIR_TEMPLATES, PIVOT_VOCAB, GenerationError, Grammar,
                                LanguageRegistry, RegistryError, Vocab, apply_suffix_rule, bio_is_valid,
                                gen_code_switched, gen_corpus, gen_language, gen_pair_cls,
                                gen_parallel_pairs, gen_token_cls, heldout_split, load_corpus_split,
                                load_jsonl, pair_examples_from_json, pivot_grammar, pivot_language,
                                save_corpus, save_jsonl, token_examples_from_json)
from adapterlab.rng import Rng
from adapterlab.tokens import CLS, N_SPECIAL, SEP

BIG_VOCAB = [f"w{i}" for i in range(200)]


def test_overlap_half_of_200_keeps_exactly_100():
    lang = gen_language("xx", 3, 0.5, pivot_vocab=BIG_VOCAB)
    assert sum(lang.mapping[w] == w for w in BIG_VOCAB) == 100


@pytest.mark.parametrize("rho,kept", [(1.0, 200), (0.0, 0), (0.25, 50)])
def test_overlap_extremes(rho, kept):
    lang = gen_language("xx", 3, rho, pivot_vocab=BIG_VOCAB)
    assert sum(lang.mapping[w] == w for w in BIG_VOCAB) == kept


@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_mapping_is_bijective_and_fresh(rho, seed):
    lang = gen_language("yy", seed, rho)
    forms = list(lang.mapping.values())
    assert len(set(forms)) == len(PIVOT_VOCAB)
    pivot = set(PIVOT_VOCAB)
    assert all(f == w or f not in pivot for w, f in lang.mapping.items())
    assert lang.invert(lang.translate(PIVOT_VOCAB)) == PIVOT_VOCAB


def test_overlap_out_of_range():
    with pytest.raises(ValueError):
        gen_language("xx", 0, 1.5)


def test_registry_rejects_duplicates():
    reg = LanguageRegistry()
    gen_language("aa", 1, 0.2, registry=reg)
    with pytest.raises(RegistryError):
        gen_language("aa", 2, 0.5, registry=reg)
    with pytest.raises(RegistryError):
        reg.register(gen_language("aa", 9, 0.1))
    assert reg.codes() == ["aa"]


def test_language_generation_is_deterministic():
    a, b = gen_language("zz", 7, 0.3), gen_language("zz", 7, 0.3)
    assert a.mapping == b.mapping
    assert gen_language("zz", 8, 0.3).mapping != a.mapping


def test_suffix_rules():
    assert apply_suffix_rule("kado", "append:ek") == "kadoek"
    assert apply_suffix_rule("kado", "reverse") == "odak"
    assert apply_suffix_rule("kado", "double_last") == "kadoo"
    with pytest.raises(RegistryError):
        apply_suffix_rule("kado", "bogus")
    lang = gen_language("sf", 1, 0.0, suffix_rule="append:zq")
    assert all(f.endswith("zq") for f in lang.mapping.values())


def test_vocab_layout():
    langs = [gen_language("l1", 1, 0.5), gen_language("l2", 2, 0.0)]
    v = Vocab(langs)
    n = len(PIVOT_VOCAB)
    assert len(v) == N_SPECIAL + n * 3
    assert v.lang_ids("eng") == list(range(N_SPECIAL, N_SPECIAL + n))
    for w, f in langs[1].mapping.items():
        assert v.encode([f], "l2")[0] == N_SPECIAL + 2 * n + PIVOT_VOCAB.index(w)
    kept = [w for w, f in langs[0].mapping.items() if f == w]
    assert v.encode(kept, "l1") == v.encode(kept, "eng")
    # a language's ids do not depend on who else is in the suite
    alone = Vocab([langs[1]])
    shift = n
    assert [i - shift for i in v.encode(list(langs[1].mapping.values()), "l2")] == \
        alone.encode(list(langs[1].mapping.values()), "l2")


def test_vocab_round_trip(tmp_path):
    v = Vocab([gen_language("l1", 1, 0.5)])
    v.save(tmp_path / "v.json")
    import json
    assert json.loads((tmp_path / "v.json").read_text()) == v.word2id
    sent = ["the", "man", "eats", "the", "apple"]
    assert v.decode(v.encode(sent, "eng")) == sent


def test_grammar_rejects_non_terminating_rules():
    with pytest.raises(GenerationError):
        Grammar({"<S>": [["<A>"]], "<A>": [["<A>", "x"]]})
    with pytest.raises(GenerationError):
        Grammar({"<S>": [["<MISSING>"]]})


def test_grammar_covers_pivot_vocabulary():
    assert pivot_grammar().terminals() == set(PIVOT_VOCAB)


@given(st.integers(0, 10_000))
def test_grammar_sentences_are_short(seed):
    s = pivot_grammar().sample(Rng(seed))
    assert 1 <= len(s) <= 10


def test_corpus_is_a_cipher_of_the_pivot_corpus():
    g = pivot_grammar()
    lang = gen_language("cc", 4, 0.2)
    pivot = gen_corpus(pivot_language(), g, 300, seed=9)
    other = gen_corpus(lang, g, 300, seed=9)
    assert [lang.invert(s) for s in other.sentences] == pivot.sentences
    # word frequencies carry over one to one
    pc = Counter(w for s in pivot.sentences for w in s)
    oc = Counter(w for s in other.sentences for w in s)
    assert sorted(pc.values()) == sorted(oc.values())
    assert all(oc[lang.mapping[w]] == c for w, c in pc.items())


def test_corpus_determinism_and_seed_sensitivity():
    g, lang = pivot_grammar(), gen_language("cc", 4, 0.2)
    assert gen_corpus(lang, g, 50, 1).sentences == gen_corpus(lang, g, 50, 1).sentences
    assert gen_corpus(lang, g, 50, 1).sentences != gen_corpus(lang, g, 50, 2).sentences


@pytest.mark.parametrize("n,frac", [(1000, 0.05), (4000, 0.05), (37, 0.1), (10, 0.0)])
def test_heldout_fraction(n, frac):
    idx = heldout_split(n, frac, 3)
    assert len(idx) == round(frac * n)
    assert all(0 <= i < n for i in idx)


def test_corpus_splits_partition(tmp_path):
    c = gen_corpus(gen_language("cc", 4, 0.2), pivot_grammar(), 200, seed=2, heldout_fraction=0.05)
    assert len(c.heldout) == 10 and len(c.train) == 190
    save_corpus(c, tmp_path)
    assert load_corpus_split(tmp_path / "train.txt") == c.train
    assert load_corpus_split(tmp_path / "heldout.txt") == c.heldout


def test_max_len_bounds_encoded_length():
    lang = gen_language("cc", 4, 0.2)
    v = Vocab([lang])
    c = gen_corpus(lang, pivot_grammar(), 300, seed=5, max_len=8)
    ids = c.ids(v)
    assert all(len(s) <= 8 and s[0] == CLS and s[-1] == SEP for s in ids)
    with pytest.raises(GenerationError):
        gen_corpus(lang, pivot_grammar(), 5, seed=5, max_len=3)


def test_token_task_bio_and_label_invariance():
    a, b = gen_language("ta", 1, 0.0), gen_language("tb", 2, 0.7)
    ea, eb = gen_token_cls(a, 200, 17), gen_token_cls(b, 200, 17)
    for x, y in zip(ea, eb):
        assert x.tags == y.tags
        assert a.invert(x.tokens) == b.invert(y.tokens) == x.pivot_tokens
        assert len(x.tokens) == len(x.tags)
        assert bio_is_valid(x.tags)
        assert set(x.tags) <= set(BIO_TAGS)
    assert {t[2:] for e in ea for t in e.tags if t != "O"} == {"PER", "LOC", "ORG"}


def test_bio_validity_examples():
    assert bio_is_valid(["B-PER", "I-PER", "O", "B-LOC"])
    assert not bio_is_valid(["I-PER"])
    assert not bio_is_valid(["B-PER", "I-LOC"])
    assert not bio_is_valid(["O", "X"])


def template_oracle(ex):
    """Recover the label from the pivot sentences alone."""
    p, h = ex.pivot_premise, ex.pivot_hypothesis
    s, v, o, pl = p[1], p[2], p[4], p[7]
    for name, (label, t) in PAIR_TEMPLATES.items():
        if "{S2}" in t or "{O2}" in t or "{PL2}" in t:
            pattern = t.split()
            if len(pattern) != len(h):
                continue
            ok = True
            for tw, hw in zip(pattern, h):
                if tw in ("{S2}", "{O2}", "{PL2}"):
                    ok &= hw != {"{S2}": s, "{O2}": o, "{PL2}": pl}[tw]
                else:
                    ok &= hw == tw.format(S=s, V=v, O=o, PL=pl)
            if ok:
                return label
        elif t.format(S=s, V=v, O=o, PL=pl).split() == h:
            return label
    raise AssertionError(f"no template explains {p} / {h}")


def test_pair_task_labels_follow_templates():
    lang = gen_language("pp", 1, 0.3)
    exs = gen_pair_cls(lang, 400, 23)
    assert {e.label for e in exs} == set(PAIR_LABELS)
    for e in exs:
        assert template_oracle(e) == e.label
        assert lang.invert(e.premise) == e.pivot_premise
    other = gen_pair_cls(gen_language("qq", 2, 0.9), 400, 23)
    assert [e.label for e in exs] == [e.label for e in other]


def test_task_generators_reject_empty():
    with pytest.raises(ValueError):
        gen_token_cls(pivot_language(), 0, 1)
    with pytest.raises(ValueError):
        gen_pair_cls(pivot_language(), -1, 1)


def test_jsonl_round_trip(tmp_path):
    lang = gen_language("jj", 1, 0.3)
    toks = gen_token_cls(lang, 20, 1)
    save_jsonl([e.to_json() for e in toks], tmp_path / "t.jsonl")
    back = token_examples_from_json(load_jsonl(tmp_path / "t.jsonl"))
    assert [(e.tokens, e.tags, e.lang) for e in back] == [(e.tokens, e.tags, e.lang) for e in toks]
    pairs = gen_pair_cls(lang, 20, 1)
    save_jsonl([e.to_json() for e in pairs], tmp_path / "p.jsonl")
    back = pair_examples_from_json(load_jsonl(tmp_path / "p.jsonl"))
    assert [(e.premise, e.hypothesis, e.label) for e in back] == [(e.premise, e.hypothesis, e.label) for e in pairs]


def test_code_switched_sentences():
    langs = [pivot_language(), gen_language("m1", 1, 0.0), gen_language("m2", 2, 0.0)]
    v = Vocab(langs)
    sents = gen_code_switched(langs, pivot_grammar(), v, 200, seed=3)
    assert sents == gen_code_switched(langs, pivot_grammar(), v, 200, seed=3)
    n = len(PIVOT_VOCAB)
    blocks = Counter()
    for s in sents:
        assert s[0] == CLS and s[-1] == SEP and len(s) <= 32
        blocks.update((i - N_SPECIAL) // n for i in s[1:-1])
    assert set(blocks) == {0, 1, 2}
    assert max(blocks.values()) / min(blocks.values()) < 1.3
    with pytest.raises(ValueError):
        gen_code_switched([], pivot_grammar(), v, 1, 0)


def test_parallel_pairs_share_content():
    langs = [pivot_language(), gen_language("m1", 1, 0.0)]
    v = Vocab(langs)
    id2 = {tid: (code, w) for code in ("eng", "m1") for w, tid in
           ((w, v.encode([langs[code == "m1"].mapping[w]], code)[0]) for w in PIVOT_VOCAB)}
    for s in gen_parallel_pairs(langs, pivot_grammar(), v, 100, seed=4, max_len=32):
        assert s[0] == CLS and s[-1] == SEP and len(s) <= 32
        cut = s.index(SEP)
        a, b = s[1:cut], s[cut + 1:-1]
        assert [id2[i][1] for i in a] == [id2[i][1] for i in b]
