"""Artifact graph for a full experiment: data -> backbone -> LAs -> TAs -> eval -> analysis -> report.

Every artifact carries a recipe hash: a digest of the configuration slice
that determines it plus the recipe hashes of its inputs. An artifact whose
recorded hash matches is reused; a mismatch is refused unless forced.
Nothing written here carries a timestamp, so identical configs produce
identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import analysis as an
from .adapters import Adapter, AdapterStack
from .checkpoint import load_checkpoint, read_metadata, save_checkpoint
from .config import BADX, WORKSPACE_ENV, ExperimentConfig, LanguageSpec, recipe_hash
from .corpora import (PIVOT, PIVOT_VOCAB, ToyLanguage, Vocab, _atomic_write_text,
                      gen_code_switched, gen_corpus, gen_language, gen_pair_cls, gen_parallel_pairs,
                      gen_token_cls, load_corpus_split, load_jsonl,
                      pair_examples_from_json, pivot_grammar, pivot_language, save_corpus,
                      save_jsonl, token_examples_from_json)
from .encoder import Encoder
from .rng import Rng, stable_hash
from .tokens import CLS, SEP
from .training_la import (EvalRecord, pretrain_backbone, select_min, train_bilingual_la,
                          train_language_adapter)
from .training_tlr import (TaskHead, TATrainConfig, TLRSchedule, Variant, build_variant,
                           encode_examples, evaluate_zero_shot, head_for_task, score, select_max,
                           train_task_adapter)

log = logging.getLogger(__name__)

STAGES = ("gen-corpus", "pretrain", "train-la", "train-ta", "eval", "analyze-alignment", "report")
PER_LANGUAGE = {Variant.TARGET.value, Variant.BILINGUAL.value, Variant.LEAVE_OUT_TARG.value, BADX}


class PipelineError(RuntimeError):
    pass


class StaleArtifactError(PipelineError):
    pass


class DependencyError(PipelineError):
    pass


def fingerprint(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def workspace_root(cfg: ExperimentConfig | None = None, override: str | os.PathLike | None = None) -> Path:
    """Explicit argument, then $ADAPTERLAB_WORKSPACE, then the config, then ./workspace."""
    if override is not None:
        return Path(override)
    if os.environ.get(WORKSPACE_ENV):
        return Path(os.environ[WORKSPACE_ENV])
    if cfg is not None and cfg.workspace:
        return Path(cfg.workspace)
    return Path("workspace")


# ---------------------------------------------------------------------- plan

@dataclass
class Node:
    key: str
    stage: str
    outputs: tuple[str, ...]
    recipe: dict
    deps: tuple[str, ...]
    action: tuple
    hash: str = field(init=False)

    def __post_init__(self):
        self.hash = recipe_hash(self.recipe)

    @property
    def stamp(self) -> str:
        """The output written last; it records the recipe hash."""
        return self.outputs[-1]


def run_name(variant: str, lang: str | None) -> str:
    return variant if lang is None else f"{variant}-{lang}"


def corpus_seed(spec: LanguageSpec | None) -> int:
    if spec is None:
        return stable_hash("corpus:" + PIVOT) & 0xFFFFFFFF
    return stable_hash(f"corpus:{spec.code}:{spec.seed}") & 0xFFFFFFFF


def _lang_recipe(spec: LanguageSpec | None) -> dict:
    if spec is None:
        return {"code": PIVOT}
    return {"code": spec.code, "seed": spec.seed, "overlap": spec.overlap,
            "suffix_rule": spec.suffix_rule, "size_class": spec.size_class}


def _runs(cfg: ExperimentConfig, task) -> list[tuple[str, str | None]]:
    out = []
    for v in cfg.variants:
        if v in PER_LANGUAGE:
            out += [(v, l) for l in task.languages]
        else:
            out.append((v, None))
    return out


def _schedule_languages(cfg: ExperimentConfig, task, variant: str, lang: str | None) -> list[str]:
    if variant == BADX:
        return [f"badx-{lang}"]
    return list(build_variant(variant, cfg.source, cfg.task_languages(), task.name, lang).languages)


def plan(cfg: ExperimentConfig) -> dict[str, Node]:
    """All artifacts of ``cfg`` in dependency order."""
    nodes: dict[str, Node] = {}

    def add(key, stage, outputs, recipe, deps, action):
        for d in deps:
            if d not in nodes:
                raise PipelineError(f"{key} depends on unknown artifact {d}")
        recipe = dict(recipe, deps={d: nodes[d].hash for d in deps})
        nodes[key] = Node(key, stage, tuple(outputs), recipe, tuple(deps), action)

    layout = {"pivot_vocab": list(PIVOT_VOCAB), "codes": [l.code for l in cfg.languages]}
    specs = {l.code: l for l in cfg.languages}
    all_codes = [PIVOT] + list(specs)

    add("vocab", "gen-corpus", ["vocab.json", "vocab.meta.json"],
        {"kind": "vocab", "layout": layout, "languages": [_lang_recipe(l) for l in cfg.languages]},
        [], ("vocab",))
    for code in all_codes:
        spec = specs.get(code)
        size = "high" if spec is None else spec.size_class
        add(f"corpus/{code}", "gen-corpus",
            [f"corpora/{code}/train.txt", f"corpora/{code}/heldout.txt", f"corpora/{code}/meta.json"],
            {"kind": "corpus", "language": _lang_recipe(spec), "n": getattr(cfg.corpus, size),
             "heldout_fraction": cfg.corpus.heldout_fraction, "max_len": cfg.model.max_len,
             "seed": corpus_seed(spec)},
            [], ("corpus", code))
    for task in cfg.tasks:
        for code in [PIVOT] + list(task.languages):
            splits = ["train", "dev", "test"] if code == PIVOT else ["test"]
            base = f"tasks/{task.name}/{code}"
            add(f"task/{task.name}/{code}", "gen-corpus",
                [f"{base}/{s}.jsonl" for s in splits] + [f"{base}/meta.json"],
                {"kind": "task", "task_kind": task.kind, "language": _lang_recipe(specs.get(code)),
                 "layout": layout, "seed": task.seed, "splits": splits,
                 "n": {s: getattr(task, f"n_{s}") for s in splits}},
                [], ("task", task.name, code))

    pre_codes = [PIVOT] + [l.code for l in cfg.languages if l.pretrain]
    add("backbone", "pretrain", ["backbone/pretrain_loss.csv", "backbone/backbone.ntar"],
        {"kind": "backbone", "model": cfg.model.to_dict(), "layout": layout,
         "pretrain": {"train": cfg.pretrain.train.to_dict(), "init_seed": cfg.pretrain.init_seed,
                      "low_cap": cfg.pretrain.low_cap, "code_switch": cfg.pretrain.code_switch,
                      "parallel": cfg.pretrain.parallel, "mix_seed": cfg.pretrain.mix_seed},
         "languages": [_lang_recipe(specs.get(c)) for c in pre_codes]},
        [f"corpus/{c}" for c in pre_codes], ("backbone",))

    la_recipe = {"kind": "la", "la_train": cfg.la_train.to_dict(), "layout": layout,
                 "drop_last_layer": cfg.drop_last_layer}
    for code in all_codes:
        add(f"la/{code}", "train-la", [f"la/{code}.csv", f"la/{code}.ntar"],
            dict(la_recipe, language=_lang_recipe(specs.get(code))),
            ["backbone", f"corpus/{code}"], ("la", code))
    if BADX in cfg.variants:
        for code in dict.fromkeys(c for t in cfg.tasks for c in t.languages):
            add(f"la/badx-{code}", "train-la", [f"la/badx-{code}.csv", f"la/badx-{code}.ntar"],
                dict(la_recipe, kind="badx-la", language=_lang_recipe(specs[code])),
                ["backbone", f"corpus/{PIVOT}", f"corpus/{code}"], ("badx_la", code))

    for task in cfg.tasks:
        for variant, lang in _runs(cfg, task):
            name = run_name(variant, lang)
            las = _schedule_languages(cfg, task, variant, lang)
            dev_la = las[0] if variant == BADX else PIVOT
            la_deps = [f"la/{c}" for c in dict.fromkeys(las + [dev_la])]
            for seed in cfg.seeds:
                base = f"ta/{task.name}/{name}/seed{seed}"
                add(base, "train-ta", [f"{base}.csv", f"{base}.ntar"],
                    {"kind": "ta", "task": task.name, "task_kind": task.kind, "variant": variant,
                     "eval_language": lang, "schedule": las, "dev_la": dev_la, "seed": seed,
                     "ta_train": task.ta.to_dict(), "drop_last_layer": cfg.drop_last_layer},
                    ["backbone", f"task/{task.name}/{PIVOT}"] + la_deps,
                    ("ta", task.name, variant, lang, seed))
                evals = [lang] if lang is not None else list(task.languages)
                eval_las = [f"la/badx-{lang}"] if variant == BADX else [f"la/{c}" for c in evals]
                ekey = f"eval/{task.name}/{name}/seed{seed}"
                add(ekey, "eval", [f"{ekey}.json"],
                    {"kind": "eval", "languages": evals},
                    list(dict.fromkeys([base, "backbone", f"la/{PIVOT}", f"task/{task.name}/{PIVOT}"]
                                       + eval_las + [f"task/{task.name}/{c}" for c in evals])),
                    ("eval", task.name, variant, lang, seed))

    a = cfg.analysis
    if a.task is not None:
        task = cfg.task(a.task)
        deps = (["backbone", f"la/{PIVOT}", f"task/{task.name}/{PIVOT}"]
                + [f"la/{c}" for c in task.languages] + [f"task/{task.name}/{c}" for c in task.languages]
                + [f"ta/{task.name}/{v}/seed{s}" for v in a.variants for s in cfg.seeds])
        add("analysis/alignment", "analyze-alignment",
            ["analysis/alignment.csv", "analysis/alignment.txt", "analysis/alignment.json"],
            {"kind": "alignment", "task": task.name, "n": a.n, "mode": a.mode,
             "variants": list(a.variants), "seeds": list(cfg.seeds)},
            deps, ("alignment",))

    report_deps = [k for k in nodes if k.startswith("eval/")]
    if a.task is not None:
        report_deps.append("analysis/alignment")
    add("report", "report", ["report/report.txt", "report/report.csv", "report/report.json"],
        {"kind": "report", "name": cfg.name, "variants": list(cfg.variants), "seeds": list(cfg.seeds),
         "tasks": [t.name for t in cfg.tasks]},
        report_deps, ("report",))
    return nodes


def downstream(nodes: Mapping[str, Node], roots: Iterable[str]) -> set[str]:
    out = set(roots)
    for key, node in nodes.items():
        if any(d in out for d in node.deps):
            out.add(key)
    return out


# -------------------------------------------------------------------- runner

@dataclass
class PipelineResult:
    built: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    train_steps: int = 0
    manifest: dict = field(default_factory=dict)


def _history_csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _write_json(path: Path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Runner:
    """Builds the nodes of :func:`plan` inside one workspace directory."""

    def __init__(self, cfg: ExperimentConfig, root: str | os.PathLike):
        self.cfg = cfg
        self.root = Path(root)
        self.nodes = plan(cfg)
        self.result = PipelineResult()
        self._langs: dict[str, ToyLanguage] | None = None
        self._vocab: Vocab | None = None
        self._encoder: Encoder | None = None
        self._las: dict[str, Adapter] = {}
        self._tas: dict[str, tuple[Adapter, TaskHead, dict]] = {}

    # ----------------------------------------------------------- status
    def path(self, rel: str) -> Path:
        return self.root / rel

    def recorded_hash(self, node: Node) -> str | None:
        stamp = self.path(node.stamp)
        if not stamp.exists() or not all(self.path(o).exists() for o in node.outputs):
            return None
        try:
            meta = read_metadata(stamp) if stamp.suffix == ".ntar" else json.loads(stamp.read_text())
        except (ValueError, OSError):
            return "unreadable"
        return meta.get("recipe_hash")

    def status(self, key: str) -> str:
        node = self.nodes[key]
        rec = self.recorded_hash(node)
        if rec is None:
            return "missing"
        return "fresh" if rec == node.hash else "stale"

    def _require(self, key: str, dep: str) -> None:
        st = self.status(dep)
        node = self.nodes[dep]
        if st == "missing":
            raise DependencyError(f"{key} needs {dep} ({node.stamp}), which is missing; "
                                  f"run the {node.stage!r} stage first")
        if st == "stale":
            raise StaleArtifactError(f"{key} needs {dep} ({node.stamp}), which is stale; "
                                     f"rebuild it with --force")

    # -------------------------------------------------------------- run
    def run(self, stages: Sequence[str] | None = None, force: bool = False) -> PipelineResult:
        if stages is not None:
            bad = [s for s in stages if s not in STAGES]
            if bad:
                raise PipelineError(f"unknown stages {bad}; known: {', '.join(STAGES)}")
        self.root.mkdir(parents=True, exist_ok=True)
        for key, node in self.nodes.items():
            if stages is not None and node.stage not in stages:
                continue
            st = self.status(key)
            if st == "fresh":
                self.result.skipped.append(key)
                continue
            if st == "stale" and not force:
                raise StaleArtifactError(
                    f"{key}: {node.stamp} was built from a different recipe "
                    f"(recorded {self.recorded_hash(node)}, expected {node.hash}); use --force to rebuild")
            for d in node.deps:
                self._require(key, d)
            log.info("building %s", key)
            getattr(self, "_build_" + node.action[0])(node, *node.action[1:])
            self.result.built.append(key)
        self.result.manifest = self.write_manifest()
        return self.result

    def write_manifest(self) -> dict:
        _write_json(self.path("config.json"), self.cfg.to_dict())
        artifacts = []
        for key, node in self.nodes.items():
            st = self.status(key)
            if st == "missing":
                continue
            for rel in node.outputs:
                artifacts.append({"path": rel, "sha256": file_sha256(self.path(rel)), "node": key,
                                  "stage": node.stage, "recipe_hash": node.hash, "status": st,
                                  "deps": list(node.deps)})
        manifest = {"config_name": self.cfg.name, "config_hash": self.cfg.hash(),
                    "extra_files": [{"path": "config.json", "sha256": file_sha256(self.path("config.json"))}],
                    "artifacts": artifacts}
        _write_json(self.path("manifest.json"), manifest)
        return manifest

    # ------------------------------------------------------------ loaders
    @property
    def languages(self) -> dict[str, ToyLanguage]:
        if self._langs is None:
            self._langs = {PIVOT: pivot_language()}
            for l in self.cfg.languages:
                self._langs[l.code] = gen_language(l.code, l.seed, l.overlap, l.suffix_rule, l.size_class)
        return self._langs

    @property
    def vocab(self) -> Vocab:
        if self._vocab is None:
            self._vocab = Vocab(list(self.languages.values()))
        return self._vocab

    def corpus_ids(self, code: str, split: str) -> list[list[int]]:
        words = load_corpus_split(self.path(f"corpora/{code}/{split}.txt"))
        return [[CLS] + self.vocab.encode(s, code) + [SEP] for s in words]

    def task_data(self, task: str, code: str, split: str) -> list:
        recs = load_jsonl(self.path(f"tasks/{task}/{code}/{split}.jsonl"))
        kind = self.cfg.task(task).kind
        return token_examples_from_json(recs) if kind == "token" else pair_examples_from_json(recs)

    def encoder(self) -> Encoder:
        if self._encoder is None:
            params, _ = load_checkpoint(self.path("backbone/backbone.ntar"))
            self._encoder = Encoder(self.cfg.model, state=params)
            self._encoder.freeze()
        return self._encoder

    def la(self, tag: str) -> Adapter:
        if tag not in self._las:
            params, meta = load_checkpoint(self.path(f"la/{tag}.ntar"))
            la = Adapter.from_state("LA", meta["tag"], meta["n_layers"], params)
            la.freeze()
            self._las[tag] = la
        return self._las[tag]

    def ta(self, key: str) -> tuple[Adapter, TaskHead, dict]:
        if key not in self._tas:
            params, meta = load_checkpoint(self.path(f"{key}.ntar"))
            ta_state = {k[3:]: v for k, v in params.items() if k.startswith("ta.")}
            head_state = {k[5:]: v for k, v in params.items() if k.startswith("head.")}
            ta = Adapter.from_state("TA", meta["tag"], meta["n_layers"], ta_state)
            head = TaskHead(meta["head_kind"], meta["head_labels"], ta.hidden, state=head_state)
            ta.freeze()
            head.params.freeze()
            self._tas[key] = (ta, head, meta)
        return self._tas[key]

    # ------------------------------------------------------------ builders
    def _build_vocab(self, node: Node) -> None:
        self.vocab.save(self.path("vocab.json"))
        _write_json(self.path("vocab.meta.json"), {"recipe_hash": node.hash, "size": len(self.vocab),
                                                   "codes": [PIVOT] + self.vocab.codes})

    def _build_corpus(self, node: Node, code: str) -> None:
        r = node.recipe
        corpus = gen_corpus(self.languages[code], pivot_grammar(), r["n"], r["seed"],
                            max_len=r["max_len"], heldout_fraction=r["heldout_fraction"])
        save_corpus(corpus, self.path(f"corpora/{code}"))
        _write_json(self.path(f"corpora/{code}/meta.json"),
                    {"recipe_hash": node.hash, "language": code, "seed": r["seed"],
                     "n_train": len(corpus.train), "n_heldout": len(corpus.heldout)})

    def _build_task(self, node: Node, task: str, code: str) -> None:
        spec = self.cfg.task(task)
        gen = gen_token_cls if spec.kind == "token" else gen_pair_cls
        lang = self.languages[code]
        for i, split in enumerate(("train", "dev", "test")):
            if split in node.recipe["splits"]:
                examples = gen(lang, getattr(spec, f"n_{split}"), spec.seed + i)
                save_jsonl((e.to_json() for e in examples), self.path(f"tasks/{task}/{code}/{split}.jsonl"))
        _write_json(self.path(f"tasks/{task}/{code}/meta.json"), {"recipe_hash": node.hash})

    def pretraining_pool(self) -> tuple[list[list[int]], list[list[int]]]:
        """Single sentences (corpora plus code-switched) and translation pairs."""
        p = self.cfg.pretrain
        pool = []
        mix = [self.languages[PIVOT]]
        for code in [PIVOT] + [l.code for l in self.cfg.languages if l.pretrain]:
            ids = self.corpus_ids(code, "train")
            spec = None if code == PIVOT else self.cfg.language(code)
            if spec is not None:
                mix.append(self.languages[code])
                if spec.size_class == "low":
                    ids = ids[:p.low_cap]
            pool += ids
        base = len(pool)
        g = pivot_grammar()
        rng = Rng(p.mix_seed)
        pool += gen_code_switched(mix, g, self.vocab, int(round(p.code_switch * base)),
                                  rng.fork("code_switch").next_u64(), self.cfg.model.max_len)
        pairs = gen_parallel_pairs(mix, g, self.vocab, int(round(p.parallel * base)),
                                   rng.fork("parallel").next_u64(), self.cfg.model.max_len)
        return pool, pairs

    def _build_backbone(self, node: Node) -> None:
        p = self.cfg.pretrain
        enc = Encoder(self.cfg.model, Rng(p.init_seed))
        pool, pairs = self.pretraining_pool()
        losses = pretrain_backbone(enc, pool, p.train, pairs=pairs)
        self.result.train_steps += len(losses)
        _atomic_write_text(self.path(node.outputs[0]),
                           _history_csv([(i + 1, l) for i, l in enumerate(losses)], ["step", "loss"]))
        save_checkpoint(enc.state_dict(), {"role": "backbone", "recipe_hash": node.hash,
                                           "model": self.cfg.model.to_dict()}, self.path(node.stamp))
        self._encoder = None

    def _save_la(self, node: Node, la: Adapter, history: Sequence[EvalRecord], audit: dict) -> None:
        best = select_min(history)
        _atomic_write_text(self.path(node.outputs[0]),
                           _history_csv([(r.step, r.heldout_ppl) for r in history], ["step", "heldout_ppl"]))
        meta = dict(la.metadata(), recipe_hash=node.hash, selected_step=best.step,
                    selected_ppl=best.heldout_ppl, freeze_check=audit)
        save_checkpoint(la.params.state_dict(), meta, self.path(node.stamp))
        self._las.pop(la.tag, None)

    def _la_train_cfg(self, tag: str):
        return replace(self.cfg.la_train, seed=stable_hash("la:" + tag) & 0xFFFFFFFF)

    def _build_la(self, node: Node, code: str) -> None:
        enc = self.encoder()
        before = fingerprint(enc.state_dict())
        la = Adapter.new("LA", code, self.cfg.model, Rng(stable_hash("la-init:" + code)), self.cfg.drop_last_layer)
        la, hist = train_language_adapter(enc, self.corpus_ids(code, "train"), self.corpus_ids(code, "heldout"),
                                          self._la_train_cfg(code), la, replace_ids=self.vocab.lang_ids(code))
        self.result.train_steps += self.cfg.la_train.steps
        self._save_la(node, la, hist, {"backbone": [before, fingerprint(enc.state_dict())]})

    def _build_badx_la(self, node: Node, code: str) -> None:
        enc = self.encoder()
        before = fingerprint(enc.state_dict())
        tag = f"badx-{code}"
        la = Adapter.new("LA", tag, self.cfg.model, Rng(stable_hash("la-init:" + tag)), self.cfg.drop_last_layer)
        ids = sorted(set(self.vocab.lang_ids(PIVOT)) | set(self.vocab.lang_ids(code)))
        la, hist = train_bilingual_la(enc, (self.corpus_ids(PIVOT, "train"), self.corpus_ids(PIVOT, "heldout")),
                                      (self.corpus_ids(code, "train"), self.corpus_ids(code, "heldout")),
                                      self._la_train_cfg(tag), la, replace_ids=ids)
        self.result.train_steps += self.cfg.la_train.steps
        self._save_la(node, la, hist, {"backbone": [before, fingerprint(enc.state_dict())]})

    def _build_ta(self, node: Node, task: str, variant: str, lang: str | None, seed: int) -> None:
        spec = self.cfg.task(task)
        enc = self.encoder()
        r = node.recipe
        las = {c: self.la(c) for c in dict.fromkeys(r["schedule"] + [r["dev_la"]])}
        watched = {"backbone": enc.state_dict(), **{f"la/{c}": a.params.state_dict() for c, a in las.items()}}
        before = {k: fingerprint(v) for k, v in watched.items()}
        if variant == BADX:
            schedule = TLRSchedule(Variant.MADX, tuple(r["schedule"]), tuple(las[c] for c in r["schedule"]))
        else:
            schedule = build_variant(variant, self.cfg.source, self.cfg.task_languages(), task, lang, adapters=las)
        tacfg = TATrainConfig(**dict(spec.ta.to_dict(), seed=seed))
        head = head_for_task(spec.kind, self.cfg.model, Rng(seed).fork("head"))
        steps = [0]

        def count(*_):
            steps[0] += 1

        ta, head, hist = train_task_adapter(enc, schedule, head, self.task_data(task, PIVOT, "train"),
                                            self.task_data(task, PIVOT, "dev"), self.vocab, tacfg,
                                            self.cfg.source, las[r["dev_la"]],
                                            drop_last_layer=self.cfg.drop_last_layer, on_step=count)
        self.result.train_steps += steps[0]
        after = {"backbone": fingerprint(enc.state_dict()),
                 **{f"la/{c}": fingerprint(a.params.state_dict()) for c, a in las.items()}}
        best = select_max(hist)
        _atomic_write_text(self.path(node.outputs[0]), _history_csv(
            [(h.step, h.active_la, h.dev_metric) for h in hist], ["step", "active_la", "dev_metric"]))
        params = {f"ta.{k}": v for k, v in ta.params.state_dict().items()}
        params.update({f"head.{k}": v for k, v in head.params.state_dict().items()})
        meta = dict(ta.metadata(), tag=f"{task}/{run_name(variant, lang)}", recipe_hash=node.hash,
                    task=task, variant=variant, eval_language=lang, seed=seed,
                    schedule=list(schedule.languages), K=schedule.K, dev_la=r["dev_la"],
                    head_kind=head.kind, head_labels=list(head.labels), selected_step=best.step,
                    selected_metric=best.dev_metric, steps_run=steps[0],
                    freeze_check={k: [before[k], after[k]] for k in before})
        save_checkpoint(params, meta, self.path(node.stamp))
        self._tas.pop(node.key, None)

    def _build_eval(self, node: Node, task: str, variant: str, lang: str | None, seed: int) -> None:
        enc = self.encoder()
        tkey = f"ta/{task}/{run_name(variant, lang)}/seed{seed}"
        ta, head, meta = self.ta(tkey)
        scores = {}
        for code in node.recipe["languages"]:
            test = self.task_data(task, code, "test")
            if variant == BADX:
                la = self.la(f"badx-{code}")
                scores[code] = score(enc, AdapterStack(la, ta, self.cfg.drop_last_layer), head, test, self.vocab)
            else:
                scores[code] = evaluate_zero_shot(enc, ta, self.la(code), head, test, self.vocab,
                                                  drop_last_layer=self.cfg.drop_last_layer)
        src_la = self.la(meta["dev_la"])
        source = score(enc, AdapterStack(src_la, ta, self.cfg.drop_last_layer), head,
                       self.task_data(task, PIVOT, "test"), self.vocab)
        _write_json(self.path(node.stamp), {"recipe_hash": node.hash, "task": task, "variant": variant,
                                            "eval_language": lang, "seed": seed, "metric": head.metric,
                                            "scores": scores, "source_test": source})

    def _build_alignment(self, node: Node) -> None:
        a = self.cfg.analysis
        task = self.cfg.task(a.task)
        enc = self.encoder()
        spec = self.cfg.task(task.name)
        head = head_for_task(spec.kind, self.cfg.model, Rng(0))
        src_ids = [i for i, _ in encode_examples(self.task_data(task.name, PIVOT, "test"), self.vocab, head)]
        tgt_ids = {c: [i for i, _ in encode_examples(self.task_data(task.name, c, "test"), self.vocab, head)]
                   for c in task.languages}
        profiles: dict[str, dict[int, list[an.AlignmentProfile]]] = {}
        for v in a.variants:
            profiles[v] = {}
            for s in self.cfg.seeds:
                ta, _, _ = self.ta(f"ta/{task.name}/{v}/seed{s}")
                src_stack = AdapterStack(self.la(PIVOT), ta, self.cfg.drop_last_layer)
                src_states = an.cls_states(enc, src_stack, src_ids[:a.n])
                row = []
                for c in task.languages:
                    tgt_states = an.cls_states(enc, AdapterStack(self.la(c), ta, self.cfg.drop_last_layer),
                                               tgt_ids[c][:a.n])
                    row.append(an.AlignmentProfile(PIVOT, c, tuple(an.profile_from_states(
                        src_states, tgt_states, a.mode)), a.n, a.mode))
                profiles[v][s] = row
        last = {v: {c: float(np.mean([profiles[v][s][i].scores[-1] for s in self.cfg.seeds]))
                    for i, c in enumerate(task.languages)} for v in a.variants}
        mean_profiles = {v: {c: [float(np.mean([profiles[v][s][i].scores[l] for s in self.cfg.seeds]))
                                 for l in range(self.cfg.model.n_layers + 1)]
                             for i, c in enumerate(task.languages)} for v in a.variants}
        csv_text = an.profiles_csv({f"{v}/seed{s}": profiles[v][s] for v in a.variants for s in self.cfg.seeds})
        _atomic_write_text(self.path(node.outputs[0]), csv_text)
        txt = []
        for v in a.variants:
            avg = [an.AlignmentProfile(PIVOT, c, tuple(mean_profiles[v][c]), a.n, a.mode) for c in task.languages]
            txt.append(f"{v} (mean over seeds {list(self.cfg.seeds)}, {a.mode} cosine, n={a.n})\n"
                       + an.format_profiles(avg))
        _atomic_write_text(self.path(node.outputs[1]), "\n".join(txt))
        out = {"recipe_hash": node.hash, "task": task.name, "mode": a.mode, "n": a.n,
               "seeds": list(self.cfg.seeds), "variants": list(a.variants),
               "per_seed": {v: {str(s): [p.to_dict() for p in profiles[v][s]] for s in self.cfg.seeds}
                            for v in a.variants},
               "mean_profiles": mean_profiles, "last_layer": last}
        _write_json(self.path(node.stamp), out)

    def _build_report(self, node: Node) -> None:
        report = build_report(self)
        report["recipe_hash"] = node.hash
        _atomic_write_text(self.path(node.outputs[0]), format_report(report))
        _atomic_write_text(self.path(node.outputs[1]), report_csv(report))
        _write_json(self.path(node.stamp), report)


# -------------------------------------------------------------------- report

def collect_results(runner: Runner, task) -> dict[str, list[dict[str, float]]]:
    """variant -> one {language: metric} map per seed."""
    out: dict[str, list[dict[str, float]]] = {}
    for variant in runner.cfg.variants:
        runs = []
        for seed in runner.cfg.seeds:
            merged: dict[str, float] = {}
            langs = list(task.languages) if variant in PER_LANGUAGE else [None]
            for lang in langs:
                rec = json.loads(runner.path(f"eval/{task.name}/{run_name(variant, lang)}/seed{seed}.json").read_text())
                merged.update(rec["scores"])
            runs.append(merged)
        out[variant] = runs
    return out


def build_report(runner: Runner) -> dict:
    cfg = runner.cfg
    report: dict = {"name": cfg.name, "config_hash": cfg.hash(), "seeds": list(cfg.seeds),
                    "variants": list(cfg.variants), "tasks": {}}
    for task in cfg.tasks:
        per_seed = collect_results(runner, task)
        averaged = {v: an.seed_average(runs) for v, runs in per_seed.items()}
        baseline = Variant.MADX.value if Variant.MADX.value in averaged else next(iter(averaged))
        table = an.aggregate(averaged, baseline)
        entry = {"metric": "f1" if task.kind == "token" else "accuracy", "baseline": baseline,
                 "table": table.to_dict(),
                 "at_least_baseline": {v: an.count_at_least(table, v) for v in table.rows},
                 "per_seed": per_seed}
        if "LEAVE_OUT_TARG" in averaged and "ALL_MULTI" in averaged:
            lo, am = table.avg["LEAVE_OUT_TARG"], table.avg["ALL_MULTI"]
            entry["leave_out"] = {"LEAVE_OUT_TARG_avg": lo, "ALL_MULTI_avg": am, "margin": am - lo}
        report["tasks"][task.name] = entry
    if cfg.analysis.task is not None:
        al = json.loads(runner.path("analysis/alignment.json").read_text())
        summary = {"task": al["task"], "mode": al["mode"], "n": al["n"], "last_layer": al["last_layer"]}
        vs = cfg.analysis.variants
        if len(vs) == 2:
            a, b = vs
            langs = list(al["last_layer"][a])
            summary["comparison"] = {"variant": b, "baseline": a,
                                     "at_least": sum(al["last_layer"][b][c] >= al["last_layer"][a][c] for c in langs),
                                     "languages": len(langs)}
        report["alignment"] = summary
    return report


def format_report(report: dict) -> str:
    lines = [f"experiment {report['name']}  config {report['config_hash']}  seeds {report['seeds']}", ""]
    for name, t in report["tasks"].items():
        tab = an.ResultTable(t["table"]["rows"], t["table"]["languages"], t["table"]["baseline"],
                             t["table"]["avg"], t["table"]["better_count"])
        lines.append(f"[{name}] zero-shot {t['metric']} x100, seed-averaged; Better = strictly above {t['baseline']}")
        lines.append(an.format_table(tab))
        at = ", ".join(f"{v} {n}/{len(tab.languages)}" for v, n in t["at_least_baseline"].items()
                       if v != t["baseline"])
        lines.append(f"at least {t['baseline']}: {at}")
        if "leave_out" in t:
            lo = t["leave_out"]
            lines.append(f"LEAVE_OUT_TARG avg {lo['LEAVE_OUT_TARG_avg']:.4f}  ALL_MULTI avg "
                         f"{lo['ALL_MULTI_avg']:.4f}  margin {lo['margin']:+.4f}")
        lines.append("")
    if "alignment" in report:
        al = report["alignment"]
        lines.append(f"[alignment] task {al['task']}, last-layer [CLS] {al['mode']} cosine, n={al['n']}")
        for v, row in al["last_layer"].items():
            lines.append(f"  {v}: " + "  ".join(f"{c} {x:.3f}" for c, x in row.items()))
        if "comparison" in al:
            c = al["comparison"]
            lines.append(f"  {c['variant']} >= {c['baseline']} on {c['at_least']}/{c['languages']} languages")
        lines.append("")
    return "\n".join(lines)


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "variant", "language", "metric", "value"])
    for name, t in report["tasks"].items():
        rows = t["table"]["rows"]
        for v, row in rows.items():
            for lang, x in row.items():
                w.writerow([name, v, lang, t["metric"], repr(x)])
            w.writerow([name, v, "avg", t["metric"], repr(t["table"]["avg"][v])])
    return buf.getvalue()


def run_pipeline(cfg: ExperimentConfig, root: str | os.PathLike | None = None,
                 stages: Sequence[str] | None = None, force: bool = False) -> PipelineResult:
    return Runner(cfg, workspace_root(cfg, root)).run(stages, force)
