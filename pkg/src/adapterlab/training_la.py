"""Masked-LM training: backbone pretraining and language-adapter training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import Adapter, AdapterStack
from .encoder import ConfigError, Encoder
from .rng import Rng
from .tokens import CLS, IGNORE_INDEX, MASK, N_SPECIAL, PAD, SEP, SPECIAL_IDS

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LATrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 5e-5
    eval_every: int = 250
    heldout_fraction: float = 0.05
    mask_rate: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError("steps, batch_size and eval_every must be positive")
        if self.steps // self.eval_every < 2:
            raise ConfigError("eval_every must leave at least 2 evaluation points")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError("mask_rate must lie in (0, 1)")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 200
    mask_rate: float = 0.15
    pair_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.warmup < 0:
            raise ConfigError("steps and batch_size must be positive, warmup non-negative")
        if self.pair_weight < 0:
            raise ConfigError("pair_weight must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalRecord:
    step: int
    heldout_ppl: float


# ------------------------------------------------------------------ batching

def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


class BatchSampler:
    """Reshuffles the pool every epoch; the last partial batch wraps around."""

    def __init__(self, items: Sequence, batch_size: int, rng: Rng, name: str = ""):
        if not items:
            raise ValueError("cannot sample batches from an empty pool")
        self.items = list(items)
        self.batch_size = batch_size
        self.rng = rng
        self.name = name
        self._order: list[int] = []

    def next(self) -> list:
        batch = []
        while len(batch) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(len(self.items))
            batch.append(self.items[self._order.pop()])
        return batch


def mlm_mask(batch: np.ndarray, mask_rate: float, rng: Rng,
             replace_ids: Sequence[int] | None = None, vocab_size: int | None = None):
    """BERT-style masking of non-special positions.

    Each eligible position is selected with probability ``mask_rate``; a
    selected position becomes [MASK] (80%), a random word (10%) or stays put
    (10%). Labels hold the original id at selected positions and
    IGNORE_INDEX elsewhere. When nothing gets selected the caller must draw
    again.
    """
    batch = np.asarray(batch)
    if (batch == MASK).any():
        raise ValueError("batch already contains [MASK] tokens")
    if replace_ids is None:
        if vocab_size is None:
            raise ValueError("need replace_ids or vocab_size")
        replace_ids = range(N_SPECIAL, vocab_size)
    replace_ids = list(replace_ids)
    masked = batch.copy()
    labels = np.full(batch.shape, IGNORE_INDEX, dtype=np.int64)
    special = np.isin(batch, list(SPECIAL_IDS))
    for idx in zip(*np.nonzero(~special)):
        if rng.random() >= mask_rate:
            continue
        labels[idx] = batch[idx]
        u = rng.random()
        if u < 0.8:
            masked[idx] = MASK
        elif u < 0.9:
            masked[idx] = rng.choice(replace_ids)
    return masked, labels


def _masked_loss(encoder: Encoder, stack, masked: np.ndarray, labels: np.ndarray) -> ad.Tensor:
    hidden = encoder.encode(masked, stack)[-1]
    rows, cols = np.nonzero(labels != IGNORE_INDEX)
    picked = ad.getitem(hidden, (rows, cols))
    logits = encoder.mlm_logits(picked)
    return ad.softmax_cross_entropy(logits, labels[rows, cols])


def _draw_mask(batch, mask_rate, rng, replace_ids, vocab_size, tries: int = 100):
    for _ in range(tries):
        masked, labels = mlm_mask(batch, mask_rate, rng, replace_ids, vocab_size)
        if (labels != IGNORE_INDEX).any():
            return masked, labels
    raise TrainingError("masking selected no positions after repeated draws")


# ----------------------------------------------------------------- perplexity

def masked_position_nll(logit_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
                        sentences: Sequence[Sequence[int]], batch_size: int = 128) -> tuple[float, int]:
    """Sum of -log p(original | context) with each maskable position masked in turn.

    ``logit_fn(batch, rows, cols)`` returns logits [n, V] for the listed
    (row, col) positions of a padded batch.
    """
    variants = []
    for s in sentences:
        for p, tok in enumerate(s):
            if tok not in SPECIAL_IDS:
                v = list(s)
                v[p] = MASK
                variants.append((v, p, tok))
    total, count = 0.0, 0
    for i in range(0, len(variants), batch_size):
        chunk = variants[i:i + batch_size]
        batch = pad_batch([v for v, _, _ in chunk])
        rows = np.arange(len(chunk))
        cols = np.array([p for _, p, _ in chunk])
        gold = np.array([t for _, _, t in chunk])
        logp = ad.log_softmax_np(np.asarray(logit_fn(batch, rows, cols), dtype=np.float64))
        total += -float(logp[rows, gold].sum())
        count += len(chunk)
    return total, count


def model_logit_fn(encoder: Encoder, la: Adapter | None, drop_last_layer: bool = True):
    stack = AdapterStack(la, None, drop_last_layer) if la is not None else None

    def fn(batch, rows, cols):
        with ad.no_grad():
            hidden = encoder.encode(batch, stack)[-1]
            return encoder.mlm_logits(ad.getitem(hidden, (rows, cols))).data

    return fn


def perplexity(encoder: Encoder, la: Adapter | None, heldout: Sequence[Sequence[int]],
               batch_size: int = 128) -> float:
    """exp(mean NLL) over every maskable held-out position."""
    if not heldout:
        raise ValueError("held-out set is empty")
    total, count = masked_position_nll(model_logit_fn(encoder, la), heldout, batch_size)
    if count == 0:
        raise ValueError("held-out set has no maskable positions")
    return math.exp(total / count)


# ------------------------------------------------------------------ training

def _lr_at(step: int, cfg: PretrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    return cfg.lr * max(0.0, (cfg.steps - step) / max(1, cfg.steps - cfg.warmup))


def pair_items(pairs: Sequence[Sequence[int]], rng: Rng) -> list[tuple[list[int], int]]:
    """Label translation pairs ``[CLS] a [SEP] b [SEP]`` for the pair objective.

    Each pair keeps its own second segment (label 1) or, with probability one
    half, takes the second segment of another pair (label 0).
    """
    out = []
    for s in pairs:
        s = list(s)
        if s.count(SEP) != 2 or s[0] != CLS:
            raise ValueError("a pair must read [CLS] a [SEP] b [SEP]")
        cut = s.index(SEP) + 1
        if len(pairs) > 1 and rng.random() < 0.5:
            j = rng.randint(len(pairs) - 1)
            other = list(pairs[j if j < len(out) else j + 1])
            out.append((s[:cut] + other[other.index(SEP) + 1:], 0))
        else:
            out.append((s, 1))
    return out


def pretrain_backbone(encoder: Encoder, sentences: Sequence[Sequence[int]], cfg: PretrainConfig,
                      on_step: Callable[[int, float], None] | None = None,
                      pairs: Sequence[Sequence[int]] = ()) -> list[float]:
    """Full-parameter MLM training of the encoder; returns per-step losses.

    ``pairs`` are translation pairs. They join the MLM pool and, when
    ``cfg.pair_weight > 0``, also train a throwaway binary head on the
    final-layer [CLS] to tell true translations from mismatched ones.
    """
    rng = Rng(cfg.seed)
    items = [(list(s), IGNORE_INDEX) for s in sentences]
    if cfg.pair_weight > 0:
        items += pair_items(pairs, rng.fork("pairs"))
    else:
        items += [(list(s), IGNORE_INDEX) for s in pairs]
    sampler = BatchSampler(items, cfg.batch_size, rng.fork("batches"))
    mrng = rng.fork("mask")
    encoder.params.unfreeze()
    head = ad.ParamStore({"w": rng.fork("pair_head").normal_array((encoder.cfg.hidden, 2), 0.02),
                          "b": np.zeros(2, np.float32)})
    opt = ad.Adam([encoder.params, head], cfg.lr)
    losses = []
    for step in range(cfg.steps):
        chosen = sampler.next()
        batch = pad_batch([s for s, _ in chosen])
        pair_labels = np.array([y for _, y in chosen])
        masked, labels = _draw_mask(batch, cfg.mask_rate, mrng, None, encoder.cfg.vocab_size)
        try:
            hidden = encoder.encode(masked)[-1]
            rows, cols = np.nonzero(labels != IGNORE_INDEX)
            loss = ad.softmax_cross_entropy(encoder.mlm_logits(ad.getitem(hidden, (rows, cols))),
                                            labels[rows, cols])
            sel = np.nonzero(pair_labels != IGNORE_INDEX)[0]
            if len(sel):
                cls = ad.getitem(hidden, (sel, np.zeros(len(sel), dtype=np.int64)))
                pair_loss = ad.softmax_cross_entropy(cls @ head["w"] + head["b"], pair_labels[sel])
                loss = loss + pair_loss * cfg.pair_weight
            ad.backward(loss)
            opt.step(_lr_at(step, cfg))
        except FloatingPointError as e:
            raise TrainingError(f"backbone pretraining step {step}: {e}") from e
        opt.zero_grad()
        losses.append(float(loss.data))
        if on_step:
            on_step(step, losses[-1])
    encoder.freeze()
    return losses


def _train_la_loop(encoder: Encoder, samplers: Sequence[BatchSampler], heldout: Sequence[Sequence[int]],
                   cfg: LATrainConfig, la: Adapter, replace_ids: Sequence[int] | None,
                   on_batch: Callable[[int, str], None] | None) -> tuple[Adapter, list[EvalRecord]]:
    if la.role != "LA":
        raise ConfigError("language-adapter training needs an adapter with role LA")
    encoder.freeze()
    la.unfreeze()
    stack = AdapterStack(la, None)
    mrng = Rng(cfg.seed).fork("mask")
    opt = ad.Adam([la.params], cfg.lr)
    history: list[EvalRecord] = []
    best: dict[str, np.ndarray] | None = None
    best_ppl = math.inf
    for step in range(1, cfg.steps + 1):
        sampler = samplers[(step - 1) % len(samplers)]
        if on_batch:
            on_batch(step, sampler.name)
        batch = pad_batch(sampler.next())
        masked, labels = _draw_mask(batch, cfg.mask_rate, mrng, replace_ids, encoder.cfg.vocab_size)
        try:
            loss = _masked_loss(encoder, stack, masked, labels)
            ad.backward(loss)
            opt.step()
        except FloatingPointError as e:
            raise TrainingError(f"LA {la.tag!r} step {step}: {e}") from e
        opt.zero_grad()
        if step % cfg.eval_every == 0:
            ppl = perplexity(encoder, la, heldout)
            history.append(EvalRecord(step, ppl))
            log.info("LA %s step %d heldout ppl %.4f", la.tag, step, ppl)
            if ppl < best_ppl:
                best_ppl, best = ppl, la.params.state_dict()
    la.params.load_state_dict(best)
    la.freeze()
    return la, history


def train_language_adapter(encoder: Encoder, train: Sequence[Sequence[int]], heldout: Sequence[Sequence[int]],
                           cfg: LATrainConfig, la: Adapter,
                           replace_ids: Sequence[int] | None = None,
                           on_batch: Callable[[int, str], None] | None = None):
    """Train ``la`` with MLM on a frozen backbone.

    Returns the adapter restored to its lowest held-out perplexity
    checkpoint (earliest on ties) and the full evaluation history.
    """
    sampler = BatchSampler(train, cfg.batch_size, Rng(cfg.seed).fork("batches"), la.tag)
    return _train_la_loop(encoder, [sampler], heldout, cfg, la, replace_ids, on_batch)


def train_bilingual_la(encoder: Encoder, src: tuple[Sequence, Sequence], tgt: tuple[Sequence, Sequence],
                       cfg: LATrainConfig, la: Adapter,
                       replace_ids: Sequence[int] | None = None,
                       on_batch: Callable[[int, str], None] | None = None):
    """Bilingual LA: batches alternate source, target, source, ...

    ``src`` and ``tgt`` are (train, heldout) pairs; perplexity is measured on
    the union of both held-out sets.
    """
    rng = Rng(cfg.seed)
    samplers = [BatchSampler(src[0], cfg.batch_size, rng.fork("src"), "src"),
                BatchSampler(tgt[0], cfg.batch_size, rng.fork("tgt"), "tgt")]
    heldout = list(src[1]) + list(tgt[1])
    return _train_la_loop(encoder, samplers, heldout, cfg, la, replace_ids, on_batch)


def select_min(history: Sequence[EvalRecord]) -> EvalRecord:
    """Lowest perplexity, earliest step on ties."""
    return min(history, key=lambda r: (r.heldout_ppl, r.step))
