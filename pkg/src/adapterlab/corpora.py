"""Synthetic multilingual data: toy languages as lexical ciphers of a pivot.

Every toy language maps each pivot word to a surface form; a fraction
``overlap`` of words keep their pivot spelling (and therefore their pivot
token id). Task examples are generated in the pivot and then ciphered, so a
fixed seed yields the same latent example in every language.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .rng import Rng, stable_hash
from .tokens import CLS, N_SPECIAL, SEP, SPECIAL_TOKENS

PIVOT = "eng"


class RegistryError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


# ------------------------------------------------------------------- lexicon

FUNCTION_WORDS = ["the", "a", "in", "is", "not", "does", "and", "for", "from", "says",
                  "that", "works", "lives"]
SUBJECTS = ["man", "woman", "child", "farmer", "teacher"]
VERBS = ["eats", "sees", "likes", "buys", "finds"]
OBJECTS = ["apple", "book", "bread", "horse", "car"]
PLACES = ["park", "market", "school"]
MARKERS = ["someone", "nobody", "something", "never", "happy"]

ENTITY_TYPES = ("PER", "LOC", "ORG")
FIRST_NAMES = ["john", "mary", "ali", "chen", "kofi"]
LAST_NAMES = ["smith", "lopez"]
LOCATIONS = [("paris",), ("lagos",), ("lima",), ("cairo",), ("new", "delhi")]
ORGS = [("acme",), ("globex",), ("united", "bank"), ("acme", "bank")]

ENTITY_WORDS = sorted({w for e in LOCATIONS + ORGS for w in e} | set(FIRST_NAMES) | set(LAST_NAMES))

PIVOT_VOCAB: list[str] = list(dict.fromkeys(
    FUNCTION_WORDS + SUBJECTS + VERBS + OBJECTS + PLACES + MARKERS
    + FIRST_NAMES + LAST_NAMES + [w for e in LOCATIONS + ORGS for w in e]))

TOKEN_CLS_TEMPLATES = [
    "{PER} {VERB} the {OBJ} in {LOC}",
    "{PER} works for {ORG}",
    "{PER} lives in {LOC}",
    "the {SUBJ} from {LOC} {VERB} {PER}",
    "{ORG} {VERB} the {OBJ}",
    "{PER} and {PER} {VERB} a {OBJ}",
    "{PER} says that {ORG} is in {LOC}",
    "the {SUBJ} works for {ORG} in {LOC}",
    "{PER} {VERB} the {OBJ} from {ORG}",
    "a {SUBJ} in {LOC} {VERB} the {OBJ}",
]

PREMISE_TEMPLATE = "the {S} {V} the {O} in the {PL}"

# name -> (label, hypothesis template); {S2}/{O2}/{PL2} differ from the premise slot.
PAIR_TEMPLATES: dict[str, tuple[str, str]] = {
    "subset": ("entail", "the {S} {V} the {O}"),
    "location": ("entail", "the {S} is in the {PL}"),
    "someone": ("entail", "someone {V} the {O}"),
    "something": ("entail", "the {S} {V} something"),
    "negated": ("contradict", "the {S} does not {V} the {O}"),
    "not_there": ("contradict", "the {S} is not in the {PL}"),
    "nobody": ("contradict", "nobody {V} the {O}"),
    "never": ("contradict", "the {S} never {V} something"),
    "other_subject": ("neutral", "the {S2} {V} the {O}"),
    "other_object": ("neutral", "the {S} {V} the {O2}"),
    "other_place": ("neutral", "the {S} is in the {PL2}"),
    "happy": ("neutral", "the {S} is happy"),
}
PAIR_LABELS = ("entail", "neutral", "contradict")
BIO_TAGS = ("O",) + tuple(f"{p}-{t}" for t in ENTITY_TYPES for p in ("B", "I"))


# ------------------------------------------------------------------- grammar

class Grammar:
    """Weighted-uniform context-free grammar over pivot words.

    Nonterminals are written ``<NAME>``; anything else is a terminal.
    """

    def __init__(self, rules: dict[str, list[list[str]]], start: str = "<S>"):
        self.rules = rules
        self.start = start
        self._check_terminates()

    def _check_terminates(self) -> None:
        productive: set[str] = set()
        changed = True
        while changed:
            changed = False
            for lhs, alts in self.rules.items():
                if lhs in productive:
                    continue
                if any(all(not _is_nt(s) or s in productive for s in alt) for alt in alts):
                    productive.add(lhs)
                    changed = True
        dead = set(self.rules) - productive
        undefined = {s for alts in self.rules.values() for alt in alts for s in alt
                     if _is_nt(s) and s not in self.rules}
        if dead or undefined:
            raise GenerationError(f"grammar does not terminate: dead={sorted(dead)} undefined={sorted(undefined)}")

    def terminals(self) -> set[str]:
        return {s for alts in self.rules.values() for alt in alts for s in alt if not _is_nt(s)}

    def sample(self, rng: Rng, symbol: str | None = None, max_depth: int = 32) -> list[str]:
        symbol = symbol or self.start
        if max_depth <= 0:
            raise GenerationError("grammar expansion exceeded depth bound")
        out: list[str] = []
        for s in rng.choice(self.rules[symbol]):
            if _is_nt(s):
                out.extend(self.sample(rng, s, max_depth - 1))
            else:
                out.append(s)
        return out


def _is_nt(s: str) -> bool:
    return s.startswith("<") and s.endswith(">")


def _template_to_rule(t: str, slot_map: dict[str, str]) -> list[str]:
    out = []
    for w in t.split():
        out.append(slot_map[w] if w.startswith("{") else w)
    return out


def pivot_grammar() -> Grammar:
    """Unlabeled-text grammar covering every pivot word the tasks use."""
    slot = {"{PER}": "<PER>", "{LOC}": "<LOC>", "{ORG}": "<ORG>", "{SUBJ}": "<SUBJ>",
            "{VERB}": "<VERB>", "{OBJ}": "<OBJ>", "{S}": "<SUBJ>", "{S2}": "<SUBJ>",
            "{V}": "<VERB>", "{O}": "<OBJ>", "{O2}": "<OBJ>", "{PL}": "<PLACE>", "{PL2}": "<PLACE>"}
    rules = {
        "<S>": [["<NER>"], ["<PREMISE>"], ["<HYP>"]],
        "<NER>": [_template_to_rule(t, slot) for t in TOKEN_CLS_TEMPLATES],
        "<PREMISE>": [_template_to_rule(PREMISE_TEMPLATE, slot)],
        "<HYP>": [_template_to_rule(h, slot) for _, h in PAIR_TEMPLATES.values()],
        "<PER>": [[f] for f in FIRST_NAMES] + [[f, l] for f in FIRST_NAMES for l in LAST_NAMES],
        "<LOC>": [list(e) for e in LOCATIONS],
        "<ORG>": [list(e) for e in ORGS],
        "<SUBJ>": [[w] for w in SUBJECTS],
        "<VERB>": [[w] for w in VERBS],
        "<OBJ>": [[w] for w in OBJECTS],
        "<PLACE>": [[w] for w in PLACES],
    }
    return Grammar(rules)


# ------------------------------------------------------------------ languages

SYLLABLE_ONSETS = "bdfgklmnprstvz"
SYLLABLE_VOWELS = "aeiou"


def apply_suffix_rule(word: str, rule: str | None) -> str:
    if not rule:
        return word
    if rule.startswith("append:"):
        return word + rule.split(":", 1)[1]
    if rule == "reverse":
        return word[::-1]
    if rule == "double_last":
        return word + word[-1]
    raise RegistryError(f"unknown suffix rule {rule!r}")


@dataclass(frozen=True)
class ToyLanguage:
    code: str
    seed: int
    overlap: float
    suffix_rule: str | None
    size_class: str
    mapping: dict[str, str] = field(repr=False, compare=False, hash=False)

    @property
    def inverse(self) -> dict[str, str]:
        return {v: k for k, v in self.mapping.items()}

    def translate(self, words: Iterable[str]) -> list[str]:
        return [self.mapping.get(w, w) for w in words]

    def invert(self, words: Iterable[str]) -> list[str]:
        inv = self.inverse
        return [inv.get(w, w) for w in words]

    def spec(self) -> dict:
        return {"code": self.code, "seed": self.seed, "overlap": self.overlap,
                "suffix_rule": self.suffix_rule, "size_class": self.size_class}


class LanguageRegistry:
    def __init__(self):
        self._langs: dict[str, ToyLanguage] = {}

    def register(self, lang: ToyLanguage) -> ToyLanguage:
        if lang.code in self._langs:
            raise RegistryError(f"language code {lang.code!r} already registered")
        self._langs[lang.code] = lang
        return lang

    def __getitem__(self, code: str) -> ToyLanguage:
        return self._langs[code]

    def __contains__(self, code: str) -> bool:
        return code in self._langs

    def codes(self) -> list[str]:
        return list(self._langs)

    def languages(self) -> list[ToyLanguage]:
        return list(self._langs.values())


def _random_form(rng: Rng) -> str:
    n = 2 + rng.randint(2)
    w = "".join(rng.choice(SYLLABLE_ONSETS) + rng.choice(SYLLABLE_VOWELS) for _ in range(n))
    return w + rng.choice(SYLLABLE_ONSETS)


def gen_language(code: str, seed: int, overlap: float, suffix_rule: str | None = None,
                 size_class: str = "low", pivot_vocab: Sequence[str] = PIVOT_VOCAB,
                 registry: LanguageRegistry | None = None) -> ToyLanguage:
    """Build a bijective cipher of ``pivot_vocab``.

    Exactly ``round(overlap * len(pivot_vocab))`` words map to themselves;
    the rest get fresh surface forms that collide with no pivot word.
    """
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    if size_class not in ("low", "high"):
        raise ValueError("size_class must be 'low' or 'high'")
    if registry is not None and code in registry:
        raise RegistryError(f"language code {code!r} already registered")
    rng = Rng(stable_hash(code) ^ seed)
    n = len(pivot_vocab)
    n_keep = int(round(overlap * n))
    order = rng.permutation(n)
    keep = {pivot_vocab[i] for i in order[:n_keep]}
    taken = set(pivot_vocab)
    mapping: dict[str, str] = {}
    for w in pivot_vocab:
        if w in keep:
            mapping[w] = w
            continue
        for _ in range(1000):
            form = apply_suffix_rule(_random_form(rng), suffix_rule)
            if form not in taken:
                break
        else:
            raise GenerationError("could not find a fresh surface form")
        taken.add(form)
        mapping[w] = form
    lang = ToyLanguage(code, seed, overlap, suffix_rule, size_class, mapping)
    if registry is not None:
        registry.register(lang)
    return lang


def pivot_language(pivot_vocab: Sequence[str] = PIVOT_VOCAB) -> ToyLanguage:
    return ToyLanguage(PIVOT, 0, 1.0, None, "high", {w: w for w in pivot_vocab})


# --------------------------------------------------------------------- vocab

class Vocab:
    """Shared id space: specials, the pivot block, then one block per language.

    A ciphered word takes id ``block_start(lang) + pivot_index``; a word kept
    verbatim reuses the pivot id. Ids of one language therefore never depend
    on another language's mapping.
    """

    def __init__(self, languages: Sequence[ToyLanguage], pivot_vocab: Sequence[str] = PIVOT_VOCAB):
        self.pivot_vocab = list(pivot_vocab)
        self.pivot_index = {w: i for i, w in enumerate(self.pivot_vocab)}
        self.codes = [l.code for l in languages if l.code != PIVOT]
        self.word2id: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        self._lang_ids: dict[str, dict[str, int]] = {}
        n = len(self.pivot_vocab)
        pivot_ids = {w: N_SPECIAL + i for i, w in enumerate(self.pivot_vocab)}
        self.word2id.update(pivot_ids)
        self._lang_ids[PIVOT] = dict(pivot_ids)
        for b, lang in enumerate(l for l in languages if l.code != PIVOT):
            start = N_SPECIAL + n * (b + 1)
            ids = {}
            for w, form in lang.mapping.items():
                tid = pivot_ids[w] if form == w else start + self.pivot_index[w]
                if form in self.word2id and self.word2id[form] != tid:
                    raise RegistryError(f"surface form {form!r} of {lang.code} collides with another language")
                self.word2id[form] = tid
                ids[form] = tid
            self._lang_ids[lang.code] = ids
        self.size = N_SPECIAL + n * (len(self.codes) + 1)
        self.id2word = {i: w for w, i in self.word2id.items()}

    def __len__(self) -> int:
        return self.size

    def lang_ids(self, code: str) -> list[int]:
        return sorted(set(self._lang_ids[code].values()))

    def encode(self, words: Sequence[str], lang: str | None = None) -> list[int]:
        table = self._lang_ids[lang] if lang else self.word2id
        return [table[w] for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id2word[i] for i in ids]

    def save(self, path: str | os.PathLike) -> None:
        _atomic_write_text(path, json.dumps(self.word2id, indent=0, sort_keys=True) + "\n")


def load_vocab_json(path: str | os.PathLike) -> dict[str, int]:
    return json.loads(Path(path).read_text())


# -------------------------------------------------------------------- corpora

@dataclass
class Corpus:
    language: str
    sentences: list[list[str]]
    heldout_idx: frozenset[int]
    seed: int

    @property
    def train(self) -> list[list[str]]:
        return [s for i, s in enumerate(self.sentences) if i not in self.heldout_idx]

    @property
    def heldout(self) -> list[list[str]]:
        return [s for i, s in enumerate(self.sentences) if i in self.heldout_idx]

    def ids(self, vocab: Vocab, split: str = "train") -> list[list[int]]:
        sents = self.train if split == "train" else self.heldout
        return [[CLS] + vocab.encode(s, self.language) + [SEP] for s in sents]


def heldout_split(n: int, fraction: float, seed: int) -> frozenset[int]:
    """The round(fraction * n) indices with the smallest (seed, index) hash keys."""
    k = int(round(fraction * n))
    keys = sorted(range(n), key=lambda i: (stable_hash(f"{seed}:{i}"), i))
    return frozenset(keys[:k])


def _sample_bounded(grammar: Grammar, rng: Rng, max_words: int, max_retries: int = 100) -> list[str]:
    for _ in range(max_retries):
        s = grammar.sample(rng)
        if len(s) <= max_words:
            return s
    raise GenerationError(f"no sentence of at most {max_words} words after {max_retries} tries")


def gen_corpus(lang: ToyLanguage, grammar: Grammar, n_sentences: int, seed: int,
               max_len: int = 32, heldout_fraction: float = 0.05, max_retries: int = 100) -> Corpus:
    """Sample pivot sentences and cipher them into ``lang``.

    ``max_len`` bounds the encoded length including [CLS] and [SEP].
    """
    rng = Rng(seed)
    sents = [lang.translate(_sample_bounded(grammar, rng, max_len - 2, max_retries))
             for _ in range(n_sentences)]
    return Corpus(lang.code, sents, heldout_split(n_sentences, heldout_fraction, seed), seed)


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for split in ("train", "heldout"):
        p = d / f"{split}.txt"
        _atomic_write_text(p, "".join(" ".join(s) + "\n" for s in getattr(corpus, split)))
        out.append(p)
    return out


def load_corpus_split(path: str | os.PathLike) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text().splitlines() if line.strip()]


# ------------------------------------------------- mixed-language pretraining

def gen_code_switched(languages: Sequence[ToyLanguage], grammar: Grammar, vocab: Vocab,
                      n: int, seed: int, max_len: int = 32) -> list[list[int]]:
    """Pivot sentences whose every word is drawn from a uniformly chosen language."""
    if not languages:
        raise ValueError("code-switching needs at least one language")
    rng = Rng(seed)
    out = []
    for _ in range(n):
        s = _sample_bounded(grammar, rng, max_len - 2)
        ids = []
        for w in s:
            lang = languages[rng.randint(len(languages))]
            ids += vocab.encode(lang.translate([w]), lang.code)
        out.append([CLS] + ids + [SEP])
    return out


def gen_parallel_pairs(languages: Sequence[ToyLanguage], grammar: Grammar, vocab: Vocab,
                       n: int, seed: int, max_len: int = 32) -> list[list[int]]:
    """[CLS] x_a [SEP] x_b [SEP] where x_a, x_b render one pivot sentence in two languages."""
    if not languages:
        raise ValueError("parallel pairs need at least one language")
    rng = Rng(seed)
    out = []
    for _ in range(n):
        s = _sample_bounded(grammar, rng, (max_len - 3) // 2)
        a = languages[rng.randint(len(languages))]
        b = languages[rng.randint(len(languages))]
        out.append([CLS] + vocab.encode(a.translate(s), a.code) + [SEP]
                   + vocab.encode(b.translate(s), b.code) + [SEP])
    return out


# -------------------------------------------------------------- labeled tasks

@dataclass
class TokenClsExample:
    tokens: list[str]
    tags: list[str]
    lang: str
    pivot_tokens: list[str] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "tags": self.tags, "lang": self.lang}


@dataclass
class PairClsExample:
    premise: list[str]
    hypothesis: list[str]
    label: str
    lang: str
    template: str = ""
    pivot_premise: list[str] = field(default_factory=list, repr=False)
    pivot_hypothesis: list[str] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"premise": self.premise, "hypothesis": self.hypothesis, "label": self.label,
                "lang": self.lang}


def _person(rng: Rng) -> tuple[str, ...]:
    first = rng.choice(FIRST_NAMES)
    return (first, rng.choice(LAST_NAMES)) if rng.random() < 0.4 else (first,)


def _pivot_token_example(rng: Rng) -> tuple[list[str], list[str]]:
    words: list[str] = []
    tags: list[str] = []
    for piece in rng.choice(TOKEN_CLS_TEMPLATES).split():
        if piece in ("{PER}", "{LOC}", "{ORG}"):
            etype = piece[1:-1]
            ent = _person(rng) if etype == "PER" else rng.choice(LOCATIONS if etype == "LOC" else ORGS)
            for j, w in enumerate(ent):
                words.append(w)
                tags.append(("B-" if j == 0 else "I-") + etype)
            continue
        if piece.startswith("{"):
            pool = {"{SUBJ}": SUBJECTS, "{VERB}": VERBS, "{OBJ}": OBJECTS}[piece]
            piece = rng.choice(pool)
        words.append(piece)
        tags.append("O")
    return words, tags


def gen_token_cls(lang: ToyLanguage, n: int, seed: int) -> list[TokenClsExample]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = Rng(seed)
    out = []
    for _ in range(n):
        words, tags = _pivot_token_example(rng)
        out.append(TokenClsExample(lang.translate(words), tags, lang.code, words))
    return out


def _other(rng: Rng, pool: Sequence[str], not_this: str) -> str:
    return rng.choice([w for w in pool if w != not_this])


def gen_pair_cls(lang: ToyLanguage, n: int, seed: int) -> list[PairClsExample]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = Rng(seed)
    names = list(PAIR_TEMPLATES)
    out = []
    for _ in range(n):
        slots = {"S": rng.choice(SUBJECTS), "V": rng.choice(VERBS), "O": rng.choice(OBJECTS),
                 "PL": rng.choice(PLACES)}
        slots["S2"] = _other(rng, SUBJECTS, slots["S"])
        slots["O2"] = _other(rng, OBJECTS, slots["O"])
        slots["PL2"] = _other(rng, PLACES, slots["PL"])
        name = rng.choice(names)
        label, hyp_t = PAIR_TEMPLATES[name]
        prem = PREMISE_TEMPLATE.format(**slots).split()
        hyp = hyp_t.format(**slots).split()
        out.append(PairClsExample(lang.translate(prem), lang.translate(hyp), label, lang.code,
                                  name, prem, hyp))
    return out


def bio_is_valid(tags: Sequence[str]) -> bool:
    prev = "O"
    for t in tags:
        if t.startswith("I-"):
            if prev == "O" or prev[2:] != t[2:]:
                return False
        elif t != "O" and not t.startswith("B-"):
            return False
        prev = t
    return True


def save_jsonl(records: Iterable[dict], path: str | os.PathLike) -> Path:
    p = Path(path)
    _atomic_write_text(p, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return p


def load_jsonl(path: str | os.PathLike) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def token_examples_from_json(records: Iterable[dict]) -> list[TokenClsExample]:
    return [TokenClsExample(r["tokens"], r["tags"], r.get("lang", "")) for r in records]


def pair_examples_from_json(records: Iterable[dict]) -> list[PairClsExample]:
    return [PairClsExample(r["premise"], r["hypothesis"], r["label"], r.get("lang", "")) for r in records]


def _atomic_write_text(path: str | os.PathLike, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, p)
