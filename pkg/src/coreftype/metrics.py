"""Evaluation protocols: multi-label F1, span F1, depth partitions.

micro_f1 pools (instance, label) decisions; macro_f1 averages the
per-instance set F1 (the fine-grained-typing benchmark convention).
Span scoring supports strict matching (identical span and type) and
lenient matching (same type, any token overlap, greedy one-to-one in
sentence order).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .corpus import label_depth


def _f1(p: float, r: float) -> float:
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def set_f1(pred: set, gold: set) -> float:
    """F1 between one prediction set and one gold set."""
    if not pred or not gold:
        return 0.0
    hit = len(set(pred) & set(gold))
    return _f1(hit / len(pred), hit / len(gold))


def micro_f1(pred_sets, gold_sets) -> float:
    """F1 over the pooled label decisions of all instances."""
    _check_aligned(pred_sets, gold_sets)
    hits = sum(len(set(p) & set(g)) for p, g in zip(pred_sets, gold_sets))
    n_pred = sum(len(p) for p in pred_sets)
    n_gold = sum(len(g) for g in gold_sets)
    precision = hits / n_pred if n_pred else 0.0
    recall = hits / n_gold if n_gold else 0.0
    return _f1(precision, recall)


def macro_f1(pred_sets, gold_sets) -> float:
    """Mean per-instance set F1 (fsum, so instance order cannot matter)."""
    _check_aligned(pred_sets, gold_sets)
    if not gold_sets:
        return 0.0
    return math.fsum(set_f1(p, g) for p, g in zip(pred_sets, gold_sets)) / len(gold_sets)


def _check_aligned(pred, gold):
    if len(pred) != len(gold):
        raise ValueError(f"prediction/gold length mismatch: {len(pred)} vs {len(gold)}")


def _overlap(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def span_f1(pred_groups, gold_groups, mode: str = "strict") -> float:
    """Micro F1 over (span, type) predictions, grouped per sentence.

    Each group is a list of (start, end, type) triples.  ``strict``
    requires identical span and type; ``lenient`` requires the same
    type and at least one token of overlap, pairing predictions and
    golds greedily in left-to-right order.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown span mode {mode!r}")
    _check_aligned(pred_groups, gold_groups)
    matches = 0
    n_pred = 0
    n_gold = 0
    for preds, golds in zip(pred_groups, gold_groups):
        _check_no_overlap(golds)
        preds = sorted(preds)
        golds = sorted(golds)
        n_pred += len(preds)
        n_gold += len(golds)
        taken = [False] * len(golds)
        for p in preds:
            for j, g in enumerate(golds):
                if taken[j]:
                    continue
                if mode == "strict":
                    hit = p == g
                else:
                    hit = p[2] == g[2] and _overlap(p[:2], g[:2])
                if hit:
                    taken[j] = True
                    matches += 1
                    break
    precision = matches / n_pred if n_pred else 0.0
    recall = matches / n_gold if n_gold else 0.0
    return _f1(precision, recall)


def _check_no_overlap(golds):
    spans = sorted((g[0], g[1]) for g in golds)
    for a, b in zip(spans, spans[1:]):
        if a[1] > b[0]:
            raise ValueError(f"overlapping gold spans {a} and {b}")


def per_label_recall(pred_sets, gold_sets) -> dict:
    """Per-label fraction of gold occurrences that were predicted.

    Labels that never occur in the gold are omitted.
    """
    _check_aligned(pred_sets, gold_sets)
    occurrences = {}
    correct = {}
    for p, g in zip(pred_sets, gold_sets):
        for lab in g:
            occurrences[lab] = occurrences.get(lab, 0) + 1
            if lab in p:
                correct[lab] = correct.get(lab, 0) + 1
    return {
        lab: correct.get(lab, 0) / n for lab, n in sorted(occurrences.items())
    }


def depth_partition(pred_sets, gold_sets) -> dict:
    """Scores per label-depth bucket (1, 2, 3+ by max gold depth)."""
    _check_aligned(pred_sets, gold_sets)
    buckets = {"1": ([], []), "2": ([], []), "3+": ([], [])}
    for p, g in zip(pred_sets, gold_sets):
        depth = max(label_depth(lab) for lab in g)
        key = "1" if depth <= 1 else "2" if depth == 2 else "3+"
        buckets[key][0].append(p)
        buckets[key][1].append(g)
    out = {}
    for key, (ps, gs) in buckets.items():
        out[key] = {
            "instances": len(gs),
            "micro_f1": micro_f1(ps, gs) if gs else 0.0,
            "macro_f1": macro_f1(ps, gs) if gs else 0.0,
        }
    return out


def confidence_report(prob_maps, gold_sets) -> list:
    """(instance, gold label, probability) rows for model comparison.

    ``prob_maps`` holds one {label: probability} dict per instance; a
    gold label missing from the map reports probability 0.0.
    """
    _check_aligned(prob_maps, gold_sets)
    rows = []
    for i, (probs, gold) in enumerate(zip(prob_maps, gold_sets)):
        for lab in sorted(gold):
            rows.append((i, lab, float(probs.get(lab, 0.0))))
    return rows


@dataclass
class EvalReport:
    micro_f1: float = 0.0
    macro_f1: float = 0.0
    strict_f1: float = None
    lenient_f1: float = None
    per_label: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)
    instances: int = 0

    def to_dict(self) -> dict:
        out = {
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "instances": self.instances,
            "per_label_recall": self.per_label,
            "depth_partition": self.depth,
        }
        if self.strict_f1 is not None:
            out["strict_f1"] = self.strict_f1
        if self.lenient_f1 is not None:
            out["lenient_f1"] = self.lenient_f1
        return out


def typing_report(pred_sets, gold_sets) -> EvalReport:
    return EvalReport(
        micro_f1=micro_f1(pred_sets, gold_sets),
        macro_f1=macro_f1(pred_sets, gold_sets),
        per_label=per_label_recall(pred_sets, gold_sets),
        depth=depth_partition(pred_sets, gold_sets),
        instances=len(gold_sets),
    )


def span_report(pred_groups, gold_groups) -> EvalReport:
    pred_sets = [{f"{t}@{s}:{e}" for s, e, t in g} for g in pred_groups]
    gold_sets = [{f"{t}@{s}:{e}" for s, e, t in g} for g in gold_groups]
    return EvalReport(
        micro_f1=micro_f1(pred_sets, gold_sets),
        macro_f1=macro_f1(pred_sets, gold_sets),
        strict_f1=span_f1(pred_groups, gold_groups, "strict"),
        lenient_f1=span_f1(pred_groups, gold_groups, "lenient"),
        instances=len(gold_groups),
    )
