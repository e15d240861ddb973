"""Evaluation: exact-span BIO matching, token-level counts, macro-averaged
classification scores, and discriminator accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adversarial import Modality, discriminate
from .data import SentenceRecord


def bio_to_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """(start, end_exclusive, type) spans; an I-tag continuing nothing is
    repaired to a span start, the conventional CoNLL reading."""
    spans: set[tuple[int, int, str]] = set()
    start = None
    current = None
    for i, tag in enumerate(tags):
        if tag == "O" or tag.startswith("B-") or (
            tag.startswith("I-") and (current is None or tag[2:] != current)
        ):
            if current is not None:
                spans.add((start, i, current))
                start = current = None
            if tag != "O":
                start, current = i, tag[2:]
        # else: continuation of the open span
    if current is not None:
        spans.add((start, len(tags), current))
    return spans


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def span_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro P/R/F1 over exact span matches."""
    tp = fp = fn = 0
    for g_tags, p_tags in zip(gold, pred):
        g, p = bio_to_spans(g_tags), bio_to_spans(p_tags)
        tp += len(g & p)
        fp += len(p - g)
        fn += len(g - p)
    return _prf(tp, fp, fn)


def token_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro P/R/F1 over non-O token tags."""
    tp = fp = fn = 0
    for g_tags, p_tags in zip(gold, pred):
        for g, p in zip(g_tags, p_tags):
            if p != "O" and p == g:
                tp += 1
            elif p != "O":
                fp += 1
            if g != "O" and p != g:
                fn += 1
    return _prf(tp, fp, fn)


def token_accuracy(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> float:
    hits = total = 0
    for g_tags, p_tags in zip(gold, pred):
        hits += sum(g == p for g, p in zip(g_tags, p_tags))
        total += len(g_tags)
    return hits / total if total else 0.0


def macro_prf(gold: Sequence[str], pred: Sequence[str], classes: Sequence[str]) -> tuple[float, float, float]:
    """Macro-averaged P/R/F1 over the fixed class inventory."""
    ps, rs, fs = [], [], []
    for cls in classes:
        tp = sum(1 for g, p in zip(gold, pred) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(gold, pred) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, pred) if g == cls and p != cls)
        p, r, f = _prf(tp, fp, fn)
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs))


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    token_precision: Optional[float] = None
    token_recall: Optional[float] = None
    token_f1: Optional[float] = None
    accuracy: Optional[float] = None
    discriminator_accuracy: Optional[float] = None
    per_fold: list = field(default_factory=list)

    def __post_init__(self):
        for value in (self.precision, self.recall, self.f1):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric out of range: {value}")

    def to_dict(self) -> dict:
        out = {"precision": self.precision, "recall": self.recall, "f1": self.f1}
        for key in ("token_precision", "token_recall", "token_f1", "accuracy",
                    "discriminator_accuracy"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


def discriminator_accuracy(model, records: Sequence[SentenceRecord]) -> Optional[float]:
    """Accuracy of the modality discriminator on both views of each record."""
    usable = [r for r in records if r.has_signals]
    if not usable:
        return None
    hits = total = 0
    for rec in usable:
        _, shared_text = model.forward_text(rec)
        probs = discriminate(shared_text, model.discriminator).values
        hits += int(np.argmax(probs)) == Modality.TEXTUAL.value
        _, shared_cog = model.forward_cognitive(rec)
        probs = discriminate(shared_cog, model.discriminator).values
        hits += int(np.argmax(probs)) == Modality.COGNITIVE.value
        total += 2
    return hits / total


def evaluate_model(model, records: Sequence[SentenceRecord], with_discriminator: bool = True) -> MetricsReport:
    """Task metrics through the inference path, plus discriminator accuracy
    when the records carry signals."""
    if model.tagset is not None:
        gold = [list(r.tags) for r in records]
        pred = [model.infer(r) for r in records]
        p, r, f = span_prf(gold, pred)
        tp_, tr_, tf_ = token_prf(gold, pred)
        report = MetricsReport(
            precision=p, recall=r, f1=f,
            token_precision=tp_, token_recall=tr_, token_f1=tf_,
            accuracy=token_accuracy(gold, pred),
        )
    else:
        gold = [r.label for r in records]
        pred = [model.infer(r)[0] for r in records]
        p, r, f = macro_prf(gold, pred, model.classes)
        acc = sum(g == q for g, q in zip(gold, pred)) / len(gold)
        report = MetricsReport(precision=p, recall=r, f1=f, accuracy=acc)
    if with_discriminator:
        report.discriminator_accuracy = discriminator_accuracy(model, records)
    return report
