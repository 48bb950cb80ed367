"""[CLS] alignment between languages and result-table aggregation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterStack
from .encoder import Encoder
from .training_la import pad_batch

ALIGNMENT_MODES = ("mean", "pairwise")


class UndefinedCosineError(ArithmeticError):
    pass


class RaggedResultsError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentProfile:
    source: str
    target: str
    scores: tuple[float, ...]
    n_examples: int
    mode: str = "mean"

    def __post_init__(self):
        for s in self.scores:
            if not -1.0 <= s <= 1.0:
                raise ValueError(f"cosine {s} outside [-1, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scores"] = list(self.scores)
        return d


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedCosineError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cls_states(encoder: Encoder, stack: AdapterStack | None, sequences: Sequence[Sequence[int]],
               batch_size: int = 128) -> np.ndarray:
    """Post-adapter [CLS] vectors at every layer: array [L+1, n, h]."""
    chunks = []
    with ad.no_grad():
        for i in range(0, len(sequences), batch_size):
            ids = pad_batch(sequences[i:i + batch_size])
            hs = encoder.encode(ids, stack)
            encoder.cls_pool(hs[-1], ids)
            chunks.append(np.stack([h.data[:, 0, :] for h in hs]))
    return np.concatenate(chunks, axis=1)


def profile_from_states(src: np.ndarray, tgt: np.ndarray, mode: str = "mean") -> list[float]:
    """Per-layer cosine of [L+1, n, h] state arrays."""
    if mode not in ALIGNMENT_MODES:
        raise ValueError(f"unknown alignment mode {mode!r}")
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if mode == "mean":
        return [cosine(s.mean(axis=0), t.mean(axis=0)) for s, t in zip(src, tgt)]
    if src.shape != tgt.shape:
        raise ValueError("pairwise mode needs index-aligned example sets")
    return [float(np.mean([cosine(a, b) for a, b in zip(s, t)])) for s, t in zip(src, tgt)]


def cls_alignment(encoder: Encoder, src_stack: AdapterStack | None, tgt_stack: AdapterStack | None,
                  src_ids: Sequence[Sequence[int]], tgt_ids: Sequence[Sequence[int]], n: int = 500,
                  mode: str = "mean", src_name: str = "src", tgt_name: str = "tgt") -> AlignmentProfile:
    """Layer-wise cosine between source and target [CLS] representations.

    ``mean`` compares the mean [CLS] vector of the first ``n`` sequences of
    each side; ``pairwise`` averages the cosine of index-aligned pairs.
    """
    if n <= 0 or n > len(src_ids) or n > len(tgt_ids):
        raise ValueError(f"n={n} must lie in [1, min({len(src_ids)}, {len(tgt_ids)})]")
    s = cls_states(encoder, src_stack, list(src_ids[:n]))
    t = cls_states(encoder, tgt_stack, list(tgt_ids[:n]))
    return AlignmentProfile(src_name, tgt_name, tuple(profile_from_states(s, t, mode)), n, mode)


# ---------------------------------------------------------------- aggregation

@dataclass
class ResultTable:
    """variant -> language -> metric, with avg and a 'better than baseline' count."""

    rows: dict[str, dict[str, float]]
    languages: list[str]
    baseline: str
    avg: dict[str, float] = field(default_factory=dict)
    better_count: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "languages": self.languages, "rows": self.rows,
                "avg": self.avg, "better_count": self.better_count}


def _check_coverage(maps: Sequence[Mapping[str, float]], what: str) -> list[str]:
    keys = set(maps[0])
    for m in maps[1:]:
        if set(m) != keys:
            raise RaggedResultsError(f"{what} cover different languages: {sorted(keys ^ set(m))}")
    return sorted(keys)


def aggregate(results: Mapping[str, Mapping[str, float]], baseline: str) -> ResultTable:
    if baseline not in results:
        raise KeyError(f"baseline {baseline!r} missing from results")
    names = list(results)
    langs = _check_coverage([results[v] for v in names], "variants")
    if not langs:
        raise RaggedResultsError("results cover no languages")
    base = results[baseline]
    table = ResultTable({v: {l: float(results[v][l]) for l in langs} for v in names}, langs, baseline)
    for v in names:
        table.avg[v] = float(np.mean([results[v][l] for l in langs]))
        table.better_count[v] = sum(results[v][l] > base[l] for l in langs)
    return table


def seed_average(runs: Sequence[Mapping[str, float]]) -> dict[str, float]:
    if not runs:
        raise ValueError("need at least one run")
    langs = _check_coverage(runs, "runs")
    return {l: float(np.mean([r[l] for r in runs])) for l in langs}


def count_at_least(table: ResultTable, variant: str) -> int:
    """Languages where ``variant`` matches or beats the baseline (non-strict)."""
    base = table.rows[table.baseline]
    return sum(table.rows[variant][l] >= base[l] for l in table.languages)


# -------------------------------------------------------------------- output

def format_table(table: ResultTable, scale: float = 100.0, digits: int = 2) -> str:
    """Variants as rows, languages then avg and Better as columns."""
    header = ["variant"] + table.languages + ["avg", "Better"]
    body = []
    for v, row in table.rows.items():
        cells = [f"{row[l] * scale:.{digits}f}" for l in table.languages]
        better = "-" if v == table.baseline else str(table.better_count[v])
        body.append([v] + cells + [f"{table.avg[v] * scale:.{digits}f}", better])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(r):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

    return "\n".join([line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in body]) + "\n"


def table_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant"] + table.languages + ["avg", "better_count"])
    for v, row in table.rows.items():
        w.writerow([v] + [repr(row[l]) for l in table.languages] + [repr(table.avg[v]), table.better_count[v]])
    return buf.getvalue()


def format_profiles(profiles: Sequence[AlignmentProfile], digits: int = 3) -> str:
    if not profiles:
        return ""
    n_layers = len(profiles[0].scores)
    header = ["pair"] + [f"L{l}" for l in range(n_layers)]
    rows = [[f"{p.source}-{p.target}"] + [f"{s:.{digits}f}" for s in p.scores] for p in profiles]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows) + "\n"


def profiles_csv(groups: Mapping[str, Sequence[AlignmentProfile]]) -> str:
    """Long format, one row per (label, pair, layer)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "source", "target", "mode", "layer", "cosine"])
    for label, profiles in groups.items():
        for p in profiles:
            for l, s in enumerate(p.scores):
                w.writerow([label, p.source, p.target, p.mode, l, repr(s)])
    return buf.getvalue()


def profiles_json(profiles: Sequence[AlignmentProfile]) -> str:
    return json.dumps([p.to_dict() for p in profiles], indent=2, sort_keys=True) + "\n"
