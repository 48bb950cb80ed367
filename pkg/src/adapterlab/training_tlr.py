"""Task-adapter training over a cycling set of frozen language adapters."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import Adapter, AdapterStack
from .autodiff import ParamStore, Tensor
from .corpora import BIO_TAGS, PAIR_LABELS, PairClsExample, TokenClsExample, Vocab
from .encoder import ConfigError, ContractError, Encoder, ModelConfig
from .rng import Rng
from .tokens import CLS, IGNORE_INDEX, SEP
from .training_la import BatchSampler, TrainingError, pad_batch

log = logging.getLogger(__name__)

HEAD_STD = 0.02


class Variant(str, enum.Enum):
    MADX = "MADX"
    TARGET = "TARGET"
    BILINGUAL = "BILINGUAL"
    TASK_MULTI = "TASK_MULTI"
    ALL_MULTI = "ALL_MULTI"
    LEAVE_OUT_TASK = "LEAVE_OUT_TASK"
    LEAVE_OUT_TARG = "LEAVE_OUT_TARG"

    @property
    def needs_eval_language(self) -> bool:
        return self in (Variant.TARGET, Variant.BILINGUAL, Variant.LEAVE_OUT_TARG)


@dataclass(frozen=True)
class TLRSchedule:
    variant: Variant
    languages: tuple[str, ...]
    las: tuple[Adapter, ...] = ()

    def __post_init__(self):
        if not self.languages:
            raise ConfigError("a schedule needs at least one language adapter")
        if self.las and len(self.las) != len(self.languages):
            raise ConfigError("adapter list and language list differ in length")

    @property
    def K(self) -> int:
        """Number of target languages exposed during training."""
        return len(self.languages) if self.variant is Variant.TARGET else len(self.languages) - 1

    def __len__(self) -> int:
        return len(self.languages)


def build_variant(variant: Variant | str, source: str, task_languages: Mapping[str, Sequence[str]],
                  task: str | None = None, eval_language: str | None = None,
                  adapters: Mapping[str, Adapter] | None = None) -> TLRSchedule:
    """LA cycle for one variant: source first, then targets in registry order.

    ``task_languages`` maps each task to its target languages; its iteration
    order is the registry order.
    """
    variant = Variant(variant)
    if variant.needs_eval_language and eval_language is None:
        raise ConfigError(f"{variant.value} needs an evaluation language")
    if variant in (Variant.TASK_MULTI, Variant.LEAVE_OUT_TASK) and task not in task_languages:
        raise ConfigError(f"{variant.value} needs a known task, got {task!r}")
    everything = [l for l in dict.fromkeys(l for ls in task_languages.values() for l in ls) if l != source]
    if variant is Variant.MADX:
        langs = [source]
    elif variant is Variant.TARGET:
        langs = [eval_language]
    elif variant is Variant.BILINGUAL:
        langs = [source, eval_language]
    elif variant is Variant.TASK_MULTI:
        langs = [source] + [l for l in task_languages[task] if l != source]
    elif variant is Variant.ALL_MULTI:
        langs = [source] + everything
    elif variant is Variant.LEAVE_OUT_TASK:
        left_out = set(task_languages[task])
        langs = [source] + [l for l in everything if l not in left_out]
        if len(langs) == 1:
            raise ConfigError(f"LEAVE_OUT_TASK for {task!r} leaves no target language")
    else:
        langs = [source] + [l for l in everything if l != eval_language]
    las: tuple[Adapter, ...] = ()
    if adapters is not None:
        missing = [l for l in langs if l not in adapters]
        if missing:
            raise ConfigError(f"missing language adapters: {missing}")
        las = tuple(adapters[l] for l in langs)
    return TLRSchedule(variant, tuple(langs), las)


def select_la(step: int, schedule: TLRSchedule) -> int:
    """Index of the single LA active for the whole batch at ``step``."""
    return step % len(schedule)


# ---------------------------------------------------------------------- heads

@dataclass(frozen=True)
class TATrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 5e-5
    eval_every: int = 250
    eval_metric: str = "f1"
    early_stop_patience: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.eval_metric not in ("f1", "accuracy"):
            raise ConfigError("eval_metric must be 'f1' or 'accuracy'")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.epochs <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError("epochs, batch_size and eval_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TaskHead:
    """Linear classifier over per-token states ("token") or the [CLS] state ("pair")."""

    def __init__(self, kind: str, labels: Sequence[str], hidden: int, rng: Rng | None = None,
                 state: dict[str, np.ndarray] | None = None):
        if kind not in ("token", "pair"):
            raise ConfigError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.labels = tuple(labels)
        self.index = {l: i for i, l in enumerate(self.labels)}
        if state is None:
            rng = rng or Rng(0)
            state = {"w": rng.normal_array((hidden, len(self.labels)), HEAD_STD),
                     "b": np.zeros(len(self.labels), np.float32)}
        self.params = ParamStore(state)

    @property
    def metric(self) -> str:
        return "f1" if self.kind == "token" else "accuracy"

    def logits(self, encoder: Encoder, hidden: list[Tensor], ids: np.ndarray) -> Tensor:
        h = hidden[-1] if self.kind == "token" else encoder.cls_pool(hidden, ids)
        return h @ self.params["w"] + self.params["b"]


def head_for_task(kind: str, cfg: ModelConfig, rng: Rng) -> TaskHead:
    return TaskHead(kind, BIO_TAGS if kind == "token" else PAIR_LABELS, cfg.hidden, rng)


# ------------------------------------------------------------------- encoding

def encode_token_example(ex: TokenClsExample, vocab: Vocab, head: TaskHead) -> tuple[list[int], list[int]]:
    ids = [CLS] + vocab.encode(ex.tokens, ex.lang) + [SEP]
    labels = [IGNORE_INDEX] + [head.index[t] for t in ex.tags] + [IGNORE_INDEX]
    return ids, labels


def encode_pair_example(ex: PairClsExample, vocab: Vocab, head: TaskHead) -> tuple[list[int], int]:
    ids = ([CLS] + vocab.encode(ex.premise, ex.lang) + [SEP]
           + vocab.encode(ex.hypothesis, ex.lang) + [SEP])
    return ids, head.index[ex.label]


def encode_examples(examples: Sequence, vocab: Vocab, head: TaskHead) -> list[tuple]:
    enc = encode_token_example if head.kind == "token" else encode_pair_example
    return [enc(ex, vocab, head) for ex in examples]


def _batch_arrays(items: Sequence[tuple], kind: str) -> tuple[np.ndarray, np.ndarray]:
    ids = pad_batch([i for i, _ in items])
    if kind == "token":
        labels = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
        for r, (_, lab) in enumerate(items):
            labels[r, :len(lab)] = lab
    else:
        labels = np.array([lab for _, lab in items], dtype=np.int64)
    return ids, labels


def task_loss(encoder: Encoder, stack: AdapterStack, head: TaskHead, ids: np.ndarray,
              labels: np.ndarray) -> Tensor:
    logits = head.logits(encoder, encoder.encode(ids, stack), ids)
    return ad.softmax_cross_entropy(logits, labels)


# ------------------------------------------------------------------- metrics

def bio_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Entity spans (start, end inclusive, type). An I-X that does not continue
    an X span opens a new one."""
    spans = set()
    start, etype = None, None
    for i, t in enumerate(list(tags) + ["O"]):
        cont = t.startswith("I-") and etype == t[2:]
        if start is not None and not cont:
            spans.add((start, i - 1, etype))
            start, etype = None, None
        if t.startswith("B-") or (t.startswith("I-") and not cont):
            start, etype = i, t[2:]
    return spans


def span_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro-averaged exact-match entity precision, recall and F1."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sequences vs {len(gold)} gold")
    tp = n_pred = n_gold = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise ValueError("predicted and gold tag sequences differ in length")
        ps, gs = bio_spans(p), bio_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def accuracy(pred: Sequence, gold: Sequence) -> float:
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions vs {len(gold)} gold labels")
    if not gold:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


# ----------------------------------------------------------------- inference

def predict(encoder: Encoder, stack: AdapterStack, head: TaskHead, items: Sequence[tuple],
            batch_size: int = 128) -> list:
    out = []
    with ad.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            ids, _ = _batch_arrays(chunk, head.kind)
            scores = head.logits(encoder, encoder.encode(ids, stack), ids).data
            best = scores.argmax(axis=-1)
            for r, (seq, lab) in enumerate(chunk):
                if head.kind == "token":
                    out.append([head.labels[k] for k in best[r, 1:len(seq) - 1]])
                else:
                    out.append(head.labels[best[r]])
    return out


def score(encoder: Encoder, stack: AdapterStack, head: TaskHead, examples: Sequence, vocab: Vocab) -> float:
    items = encode_examples(examples, vocab, head)
    pred = predict(encoder, stack, head, items)
    if head.kind == "token":
        return span_f1(pred, [ex.tags for ex in examples])[2]
    return accuracy(pred, [ex.label for ex in examples])


def evaluate_zero_shot(encoder: Encoder, ta: Adapter, la: Adapter, head: TaskHead, examples: Sequence,
                       vocab: Vocab, metric: str | None = None, drop_last_layer: bool = True) -> float:
    """Metric of the (target LA -> TA) stack on target-language test data."""
    if metric is not None and metric != head.metric:
        raise ConfigError(f"metric {metric!r} does not match a {head.kind} head")
    langs = {ex.lang for ex in examples}
    if langs != {la.tag}:
        raise ContractError(f"test data languages {sorted(langs)} do not match LA {la.tag!r}")
    return score(encoder, AdapterStack(la, ta, drop_last_layer), head, examples, vocab)


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class MetricRecord:
    step: int
    active_la: str
    dev_metric: float


def select_max(history: Sequence[MetricRecord]) -> MetricRecord:
    """Highest dev metric, earliest step on ties."""
    return min(history, key=lambda r: (-r.dev_metric, r.step))


def train_task_adapter(encoder: Encoder, schedule: TLRSchedule, head: TaskHead,
                       train: Sequence, dev: Sequence, vocab: Vocab, cfg: TATrainConfig,
                       source: str, dev_la: Adapter, ta: Adapter | None = None,
                       drop_last_layer: bool = True,
                       on_step: Callable[[int, str, float], None] | None = None):
    """Train a TA (and its head) while cycling the frozen LAs of ``schedule``.

    Only source-language examples are accepted. Dev selection runs on the
    source dev set through ``dev_la``. Returns (ta, head, history) with the
    TA and head restored to the best dev checkpoint.
    """
    if cfg.eval_metric != head.metric:
        raise ConfigError(f"eval metric {cfg.eval_metric!r} does not match a {head.kind} head")
    foreign = {ex.lang for ex in list(train) + list(dev)} - {source}
    if foreign:
        raise ContractError(f"zero-shot violation: task data in {sorted(foreign)}")
    if not schedule.las:
        raise ConfigError("schedule has no adapters attached")
    rng = Rng(cfg.seed)
    if ta is None:
        ta = Adapter.new("TA", "ta", encoder.cfg, rng.fork("ta"), drop_last_layer)
    for la in schedule.las + (dev_la,):
        if la.n_layers != encoder.cfg.n_layers or la.n_layers != ta.n_layers:
            raise ConfigError("schedule / backbone layer mismatch")
    encoder.freeze()
    for la in schedule.las + (dev_la,):
        la.freeze()
    ta.unfreeze()
    head.params.unfreeze()

    items = encode_examples(train, vocab, head)
    dev_stack = AdapterStack(dev_la, ta, drop_last_layer)
    stacks = [AdapterStack(la, ta, drop_last_layer) for la in schedule.las]
    sampler = BatchSampler(items, cfg.batch_size, rng.fork("batches"))
    opt = ad.Adam([ta.params, head.params], cfg.lr)
    total = cfg.epochs * math.ceil(len(items) / cfg.batch_size)

    history: list[MetricRecord] = []
    best_metric, best_state, bad = -math.inf, None, 0
    for step in range(total):
        k = select_la(step, schedule)
        ids, labels = _batch_arrays(sampler.next(), head.kind)
        try:
            loss = task_loss(encoder, stacks[k], head, ids, labels)
            ad.backward(loss)
            opt.step()
        except FloatingPointError as e:
            raise TrainingError(f"TA step {step} (LA {schedule.languages[k]}): {e}") from e
        opt.zero_grad()
        if on_step:
            on_step(step, schedule.languages[k], float(loss.data))
        if (step + 1) % cfg.eval_every == 0 or step + 1 == total:
            metric = score(encoder, dev_stack, head, dev, vocab)
            history.append(MetricRecord(step + 1, schedule.languages[k], metric))
            log.debug("TA %s step %d dev %s %.4f", schedule.variant.value, step + 1, cfg.eval_metric, metric)
            if metric > best_metric:
                best_metric, bad = metric, 0
                best_state = (ta.params.state_dict(), head.params.state_dict())
            else:
                bad += 1
                if cfg.early_stop_patience and bad >= cfg.early_stop_patience:
                    break
    ta.params.load_state_dict(best_state[0])
    head.params.load_state_dict(best_state[1])
    ta.freeze()
    head.params.freeze()
    return ta, head, history

