"""Experiment configuration: JSON in, validated frozen dataclasses out."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .corpora import PIVOT, PIVOT_VOCAB
from .encoder import ConfigError, ModelConfig
from .tokens import N_SPECIAL
from .training_la import LATrainConfig, PretrainConfig
from .training_tlr import TATrainConfig, Variant

WORKSPACE_ENV = "ADAPTERLAB_WORKSPACE"
BADX = "BADX"
KNOWN_VARIANTS = tuple(v.value for v in Variant) + (BADX,)


def suite_vocab_size(n_languages: int) -> int:
    """Specials plus one block for the pivot and one per toy language."""
    return N_SPECIAL + len(PIVOT_VOCAB) * (n_languages + 1)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def recipe_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class LanguageSpec:
    code: str
    seed: int
    overlap: float
    size_class: str = "low"
    suffix_rule: str | None = None
    pretrain: bool = True


@dataclass(frozen=True)
class CorpusSpec:
    high: int = 4000
    low: int = 1000
    heldout_fraction: float = 0.05


@dataclass(frozen=True)
class PretrainSpec:
    """Backbone MLM pretraining and the make-up of its data pool."""

    train: PretrainConfig = field(default_factory=PretrainConfig)
    init_seed: int = 1
    low_cap: int = 300
    code_switch: float = 0.3
    parallel: float = 0.3
    mix_seed: int = 5


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    languages: tuple[str, ...]
    n_train: int
    n_dev: int = 200
    n_test: int = 500
    seed: int = 11
    ta: TATrainConfig = field(default_factory=TATrainConfig)

    def __post_init__(self):
        if self.kind not in ("token", "pair"):
            raise ConfigError(f"task {self.name!r}: kind must be 'token' or 'pair'")
        if min(self.n_train, self.n_dev, self.n_test) <= 0:
            raise ConfigError(f"task {self.name!r}: example counts must be positive")
        want = "f1" if self.kind == "token" else "accuracy"
        if self.ta.eval_metric != want:
            raise ConfigError(f"task {self.name!r}: a {self.kind} task is scored by {want}")


@dataclass(frozen=True)
class AnalysisSpec:
    task: str | None = None
    n: int = 500
    mode: str = "mean"
    variants: tuple[str, ...] = ("MADX", "ALL_MULTI")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelConfig
    languages: tuple[LanguageSpec, ...]
    tasks: tuple[TaskSpec, ...]
    source: str = PIVOT
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    la_train: LATrainConfig = field(default_factory=LATrainConfig)
    variants: tuple[str, ...] = ("MADX", "ALL_MULTI")
    seeds: tuple[int, ...] = (0,)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    drop_last_layer: bool = True
    workspace: str | None = None

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------ validation
    def validate(self) -> None:
        codes = [l.code for l in self.languages]
        if len(set(codes)) != len(codes):
            raise ConfigError("duplicate language codes")
        if self.source != PIVOT:
            raise ConfigError(f"the source language must be the pivot {PIVOT!r}")
        if PIVOT in codes:
            raise ConfigError(f"{PIVOT!r} is implicit and must not be listed")
        for l in self.languages:
            if l.size_class not in ("low", "high"):
                raise ConfigError(f"language {l.code!r}: unknown size class {l.size_class!r}")
            if not 0.0 <= l.overlap <= 1.0:
                raise ConfigError(f"language {l.code!r}: overlap outside [0, 1]")
        names = [t.name for t in self.tasks]
        if not names or len(set(names)) != len(names):
            raise ConfigError("tasks must be non-empty with unique names")
        for t in self.tasks:
            unknown = [c for c in t.languages if c not in codes]
            if unknown:
                raise ConfigError(f"task {t.name!r} references unknown languages {unknown}")
            if not t.languages:
                raise ConfigError(f"task {t.name!r} has no target languages")
        want_v = suite_vocab_size(len(self.languages))
        if self.model.vocab_size != want_v:
            raise ConfigError(f"model.vocab_size is {self.model.vocab_size}, the suite needs {want_v}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct")
        for v in self.variants:
            if v not in KNOWN_VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; known: {', '.join(KNOWN_VARIANTS)}")
        if Variant.LEAVE_OUT_TASK.value in self.variants:
            everything = {c for t in self.tasks for c in t.languages}
            for t in self.tasks:
                if not everything - set(t.languages):
                    raise ConfigError(f"LEAVE_OUT_TASK for {t.name!r} leaves no target language")
        a = self.analysis
        if a.task is not None:
            if a.task not in names:
                raise ConfigError(f"analysis task {a.task!r} is not configured")
            missing = [v for v in a.variants if v not in self.variants]
            if missing:
                raise ConfigError(f"analysis variants {missing} are not in the run list")
            if any(Variant(v).needs_eval_language for v in a.variants if v != BADX):
                raise ConfigError("alignment analysis compares variants with one TA per seed")
            if a.n > self.task(a.task).n_test:
                raise ConfigError("alignment n exceeds the task's test-set size")
            if a.mode not in ("mean", "pairwise"):
                raise ConfigError(f"unknown alignment mode {a.mode!r}")

    # ------------------------------------------------------------- accessors
    def language(self, code: str) -> LanguageSpec:
        for l in self.languages:
            if l.code == code:
                return l
        raise ConfigError(f"unknown language {code!r}")

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"unknown task {name!r}")

    def task_languages(self) -> dict[str, list[str]]:
        return {t.name: list(t.languages) for t in self.tasks}

    def with_overrides(self, seeds=None, variants=None) -> "ExperimentConfig":
        kw = {}
        if seeds is not None:
            kw["seeds"] = tuple(seeds)
        if variants is not None:
            kw["variants"] = tuple(variants)
            a = self.analysis
            kw["analysis"] = replace(a, task=a.task if all(v in variants for v in a.variants) else None)
        return replace(self, **kw) if kw else self

    # ---------------------------------------------------------------- serial
    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d.pop("workspace")
        return d

    def hash(self) -> str:
        return recipe_hash(self.to_dict())


def _build(cls, d: dict, nested: dict | None = None):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(extra)}")
    kw = dict(d)
    for k, fn in (nested or {}).items():
        if k in kw:
            kw[k] = fn(kw[k])
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    n_langs = len(d.get("languages", ()))

    def model(m):
        m = dict(m)
        m.setdefault("vocab_size", suite_vocab_size(n_langs))
        return m

    return _build(ExperimentConfig, d, {
        "model": lambda m: _build(ModelConfig, model(m)),
        "languages": lambda ls: tuple(_build(LanguageSpec, l) for l in ls),
        "tasks": lambda ts: tuple(_build(TaskSpec, t, {
            "languages": tuple,
            "ta": lambda x: _build(TATrainConfig, x)}) for t in ts),
        "corpus": lambda c: _build(CorpusSpec, c),
        "pretrain": lambda p: _build(PretrainSpec, p, {"train": lambda x: _build(PretrainConfig, x)}),
        "la_train": lambda x: _build(LATrainConfig, x),
        "variants": tuple,
        "seeds": tuple,
        "analysis": lambda a: _build(AnalysisSpec, a, {"variants": tuple}),
    })


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(d)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ presets

DEFAULT_SUITE = (("x0l", 0.0, "low"), ("x0h", 0.0, "high"), ("x2l", 0.2, "low"),
                 ("x2h", 0.2, "high"), ("x5l", 0.5, "low"), ("x5h", 0.5, "high"))


def desk_config(seeds=(0, 1, 2), variants=("MADX", "ALL_MULTI", "BILINGUAL", "LEAVE_OUT_TARG"),
                language_seed: int = 7) -> ExperimentConfig:
    """The default toy suite at a budget of roughly a quarter hour on one core."""
    langs = tuple(LanguageSpec(c, language_seed, r, s) for c, r, s in DEFAULT_SUITE)
    codes = tuple(l.code for l in langs)
    tasks = (
        TaskSpec("ner", "token", codes, n_train=800, seed=11,
                 ta=TATrainConfig(epochs=5, batch_size=8, lr=1e-3, eval_every=50, eval_metric="f1")),
        TaskSpec("nli", "pair", codes, n_train=1600, seed=21,
                 ta=TATrainConfig(epochs=8, batch_size=32, lr=1e-3, eval_every=50, eval_metric="accuracy")),
    )
    return ExperimentConfig(
        name="desk",
        model=ModelConfig(vocab_size=suite_vocab_size(len(langs))),
        languages=langs,
        tasks=tasks,
        la_train=LATrainConfig(steps=1000, batch_size=8, lr=1e-3, eval_every=250),
        variants=tuple(variants),
        seeds=tuple(seeds),
        analysis=AnalysisSpec(task="nli", n=500),
    )


def tiny_config(seeds=(0,), variants=("MADX", "ALL_MULTI")) -> ExperimentConfig:
    """A seconds-scale configuration for smoke tests."""
    langs = (LanguageSpec("ta0", 3, 0.0, "high"), LanguageSpec("tb5", 3, 0.5, "low"),
             LanguageSpec("tc2", 3, 0.2, "low", pretrain=False))
    codes = tuple(l.code for l in langs)
    tasks = (
        TaskSpec("ner", "token", codes, n_train=40, n_dev=16, n_test=24, seed=11,
                 ta=TATrainConfig(epochs=1, batch_size=8, lr=1e-3, eval_every=2, eval_metric="f1")),
        TaskSpec("nli", "pair", codes, n_train=40, n_dev=16, n_test=24, seed=21,
                 ta=TATrainConfig(epochs=1, batch_size=8, lr=1e-3, eval_every=2, eval_metric="accuracy")),
    )
    return ExperimentConfig(
        name="tiny",
        model=ModelConfig(n_layers=2, hidden=16, n_heads=2, ffn_size=32, vocab_size=suite_vocab_size(len(langs)),
                          la_reduction=2, ta_reduction=4),
        languages=langs,
        tasks=tasks,
        corpus=CorpusSpec(high=60, low=40),
        pretrain=PretrainSpec(train=PretrainConfig(steps=20, batch_size=8, warmup=5), low_cap=20),
        la_train=LATrainConfig(steps=8, batch_size=4, lr=1e-3, eval_every=4),
        variants=tuple(variants),
        seeds=tuple(seeds),
        analysis=AnalysisSpec(task="nli", n=16),
    )
