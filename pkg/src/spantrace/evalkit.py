"""Span-extraction metrics, classification metrics, and masking faithfulness.

Spans are 0-indexed half-open character intervals. Every metric that would
divide by zero reports 0 and records a flag naming the cause.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .encoder import MASK, EncoderParams, Vocabulary, probabilities_for_ids
from .errors import ContractViolation, ValidationError

Span = tuple[int, int]
MATCH_THRESHOLD = 0.5
TOPK_FRACTION = 0.15


@dataclass
class SpanPrediction:
    id: str
    pred: list[Span]
    gold: list[Span]
    length: int

    def __post_init__(self):
        self.pred = [(int(s), int(e)) for s, e in self.pred]
        self.gold = [(int(s), int(e)) for s, e in self.gold]
        for s, e in self.pred + self.gold:
            if not 0 <= s < e <= self.length:
                raise ValidationError(f"{self.id}: span [{s},{e}) outside text of length {self.length}")


class SpanScores(NamedTuple):
    recall: float
    precision: float
    f1: float
    flags: tuple[str, ...] = ()


class CharScores(NamedTuple):
    recall: float
    precision: float
    f1: float
    iou: float
    flags: tuple[str, ...] = ()


class ClassScores(NamedTuple):
    accuracy: float
    recall: float
    precision: float
    f1: float
    macro_f1: float


def _ratio(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p > 0 and r > 0 else 0.0


def _overlap(a: Span, b: Span) -> int:
    return max(0, min(a[1], b[1]) - max(a[0], b[0]))


def match_spans(pred: Sequence[Span], gold: Sequence[Span]) -> list[tuple[int, int]]:
    """Greedy one-to-one matching, largest overlap first.

    A pair is eligible when the overlap covers more than half of the gold
    span. Ties are broken by span position so the result does not depend on
    input order.
    """
    cands = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gold):
            ov = _overlap(p, g)
            if ov / (g[1] - g[0]) > MATCH_THRESHOLD:
                cands.append((-ov, g, p, i, j))
    cands.sort(key=lambda c: c[:3])
    used_p, used_g, pairs = set(), set(), []
    for _, _, _, i, j in cands:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return pairs


def overlap_metrics(predictions: Sequence[SpanPrediction]) -> SpanScores:
    matched = n_pred = n_gold = 0
    for sp in predictions:
        matched += len(match_spans(sp.pred, sp.gold))
        n_pred += len(sp.pred)
        n_gold += len(sp.gold)
    flags: list[str] = []
    r = _ratio(matched, n_gold, "no_gold_spans", flags)
    p = _ratio(matched, n_pred, "no_predicted_spans", flags)
    return SpanScores(r, p, _f1(p, r), tuple(flags))


def _chars(spans: Sequence[Span]) -> set[int]:
    return {i for s, e in spans for i in range(s, e)}


def char_metrics(predictions: Sequence[SpanPrediction]) -> CharScores:
    """Micro-averaged character precision, recall, F1 and IoU."""
    inter = n_pred = n_gold = 0
    flags: list[str] = []
    for sp in predictions:
        cp, cg = _chars(sp.pred), _chars(sp.gold)
        if not cp:
            flags.append(f"empty_prediction:{sp.id}")
        if not cg:
            flags.append(f"empty_gold:{sp.id}")
        inter += len(cp & cg)
        n_pred += len(cp)
        n_gold += len(cg)
    p = _ratio(inter, n_pred, "no_predicted_chars", flags)
    r = _ratio(inter, n_gold, "no_gold_chars", flags)
    iou = _ratio(inter, n_pred + n_gold - inter, "empty_union", flags)
    return CharScores(r, p, _f1(p, r), iou, tuple(flags))


def classification_metrics(labels, predictions) -> ClassScores:
    y = np.asarray(labels, dtype=int)
    yhat = np.asarray(predictions, dtype=int)
    if y.shape != yhat.shape:
        raise ContractViolation("labels and predictions differ in length")
    if y.size == 0:
        return ClassScores(0.0, 0.0, 0.0, 0.0, 0.0)

    def prf(pos: int):
        tp = int(np.sum((yhat == pos) & (y == pos)))
        pp, ap = int(np.sum(yhat == pos)), int(np.sum(y == pos))
        p = tp / pp if pp else 0.0
        r = tp / ap if ap else 0.0
        return p, r, _f1(p, r)

    p1, r1, f1 = prf(1)
    _, _, f0 = prf(0)
    return ClassScores(float(np.mean(y == yhat)), r1, p1, f1, (f0 + f1) / 2)


# --- faithfulness ----------------------------------------------------------

@dataclass
class FaithfulnessRecord:
    id: str
    before: float
    after_span: float
    after_random: float
    masked: int
    seed: int
    flags: list[str] = field(default_factory=list)

    @property
    def span_drop(self) -> float:
        return self.before - self.after_span

    @property
    def random_drop(self) -> float:
        return self.before - self.after_random

    def to_json(self) -> dict:
        return {"id": self.id, "before": self.before, "after_span": self.after_span,
                "after_random": self.after_random, "span_drop": self.span_drop,
                "random_drop": self.random_drop, "masked": self.masked, "seed": self.seed,
                "flags": list(self.flags)}


def masked_ids(vocab: Vocabulary, text: str, positions, max_positions: int) -> np.ndarray:
    """Token ids with the given character positions replaced by the mask id."""
    ids = vocab.encode(text, max_positions)
    pos = np.asarray(sorted(positions), dtype=np.intp)
    if pos.size:
        ids[pos + 1] = MASK
    return ids


def confidence_drop(params: EncoderParams, vocab: Vocabulary, text: str, spans: Sequence[Span]) -> tuple[float, float]:
    """(P(toxic) before, after masking every character inside ``spans``)."""
    base = vocab.encode(text, params.max_positions)
    masked = masked_ids(vocab, text, _chars(spans), params.max_positions)
    before, after = probabilities_for_ids(params, [base, masked])
    return float(before), float(after)


def random_positions(length: int, k: int, seed) -> np.ndarray:
    if not 0 <= k <= length:
        raise ContractViolation(f"cannot mask {k} of {length} tokens")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(length, size=k, replace=False))


def random_mask_baseline(params: EncoderParams, vocab: Vocabulary, text: str, k: int, seed) -> float:
    """Drop in P(toxic) after masking ``k`` uniformly chosen characters."""
    base = vocab.encode(text, params.max_positions)
    masked = masked_ids(vocab, text, random_positions(len(text), k, seed), params.max_positions)
    before, after = probabilities_for_ids(params, [base, masked])
    return float(before - after)


def faithfulness(params: EncoderParams, vocab: Vocabulary, samples, seed: int = 7) -> list[FaithfulnessRecord]:
    """Span masking against count-matched random masking.

    ``samples`` holds ``(id, text, spans)`` triples. Sample ``i`` draws its
    random positions from ``default_rng([seed, i])``. All sequences are
    scored in one batched pass.
    """
    rows, seqs = [], []
    for i, (sid, text, spans) in enumerate(samples):
        chars = _chars(spans)
        k = len(chars)
        rand = random_positions(len(text), k, [seed, i])
        seqs += [vocab.encode(text, params.max_positions),
                 masked_ids(vocab, text, chars, params.max_positions),
                 masked_ids(vocab, text, rand, params.max_positions)]
        rows.append((sid, k, i))
    probs = probabilities_for_ids(params, seqs).reshape(-1, 3) if seqs else np.zeros((0, 3))
    out = []
    for (sid, k, i), (before, after_span, after_rand) in zip(rows, probs):
        out.append(FaithfulnessRecord(sid, float(before), float(after_span), float(after_rand), k,
                                      i, [] if k else ["empty_spans"]))
    return out


def faithfulness_summary(records: Sequence[FaithfulnessRecord]) -> dict:
    n = len(records)
    span = float(np.mean([r.span_drop for r in records])) if n else 0.0
    rand = float(np.mean([r.random_drop for r in records])) if n else 0.0
    return {"samples": n, "mean_span_drop": span, "mean_random_drop": rand, "gap": span - rand}


def topk_spans(scores, fraction: float = TOPK_FRACTION, offsets=None) -> list[Span]:
    """Baseline extractor: the ``ceil(fraction * n)`` highest scores, grouped into runs."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        return []
    k = max(1, math.ceil(fraction * n))
    chosen = np.zeros(n, dtype=bool)
    chosen[np.argsort(-scores, kind="stable")[:k]] = True
    offsets = list(range(n)) if offsets is None else list(offsets)
    spans, start = [], None
    for i in range(n + 1):
        if i < n and chosen[i]:
            start = i if start is None else start
        elif start is not None:
            spans.append((offsets[start], offsets[i - 1] + 1))
            start = None
    return spans


# --- reports ---------------------------------------------------------------

@dataclass
class MetricsReport:
    kind: str
    metrics: dict
    counts: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"kind": self.kind, "metrics": self.metrics, "counts": self.counts,
               "flags": list(self.flags), "config": self.config}
        return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="\n")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "metric", "value"])
        for key in sorted(self.metrics):
            writer.writerow([self.kind, key, repr(self.metrics[key])])
        return buf.getvalue()

    @classmethod
    def read(cls, path) -> "MetricsReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["kind"], doc["metrics"], doc.get("counts", {}), doc.get("flags", []),
                   doc.get("config", {}))


def span_report(predictions: Sequence[SpanPrediction], config: dict | None = None) -> MetricsReport:
    ov, ch = overlap_metrics(predictions), char_metrics(predictions)
    metrics = {"overlap_recall": ov.recall, "overlap_precision": ov.precision, "overlap_f1": ov.f1,
               "char_recall": ch.recall, "char_precision": ch.precision, "char_f1": ch.f1,
               "char_iou": ch.iou}
    counts = {"samples": len(predictions),
              "pred_spans": sum(len(p.pred) for p in predictions),
              "gold_spans": sum(len(p.gold) for p in predictions)}
    return MetricsReport("spans", metrics, counts, list(ov.flags) + list(ch.flags), config or {})


def classification_report(labels, predictions, config: dict | None = None) -> MetricsReport:
    s = classification_metrics(labels, predictions)
    return MetricsReport("classification", dict(s._asdict()),
                         {"samples": len(labels), "positives": int(np.sum(np.asarray(labels) == 1))},
                         [], config or {})


def faithfulness_report(records: Sequence[FaithfulnessRecord], config: dict | None = None) -> MetricsReport:
    summary = faithfulness_summary(records)
    n = summary.pop("samples")
    flags = [f"{r.id}:{f}" for r in records for f in r.flags]
    return MetricsReport("faithfulness", summary, {"samples": n}, flags, config or {})
