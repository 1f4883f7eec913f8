"""Multi-label ranking metrics and the per-level / per-category report.

Predictions are one ``{label_id: score}`` dict per example and truths one
set of label ids per example.  Every ranking breaks score ties by ascending
label id (across labels) or ascending example index (across examples), so
results are fully deterministic.

Results are reported as error rates, ``100 * (1 - metric)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, UndefinedMetricError
from .taxonomy import MAX_LEVELS, Taxonomy

METRICS = ("gap", "map", "perr", "hit1")
METRIC_TITLES = {"gap": "GAP", "map": "MAP", "perr": "PERR", "hit1": "Hit@1"}
DEFAULT_TOP_K = 20

Prediction = Mapping[int, float]


def _check_lengths(preds, truths):
    if len(preds) != len(truths):
        raise DimensionError(f"{len(preds)} predictions but {len(truths)} truth sets")


def ranked_labels(pred: Prediction, k: int | None = None) -> list[int]:
    """Labels by descending score, ties to the lower id."""
    order = sorted(pred, key=lambda lab: (-pred[lab], lab))
    return order if k is None else order[:k]


def error_rate(metric: float) -> float:
    return 100.0 * (1.0 - metric)


def global_average_precision(
    preds: Sequence[Prediction], truths: Sequence[Iterable[int]], top_k: int = DEFAULT_TOP_K
) -> float:
    """Average precision over the pooled top-k predictions of all examples.

    Each example contributes its ``top_k`` highest-scored labels.  The pooled
    list is ranked by score (ties: label id, then example index) and AP is
    the sum of precision at each correct item divided by the number of
    positives, where an example contributes at most ``top_k`` positives.
    """
    _check_lengths(preds, truths)
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    pooled = []
    n_pos = 0
    for i, (pred, truth) in enumerate(zip(preds, truths)):
        truth = set(truth)
        n_pos += min(len(truth), top_k)
        for lab in ranked_labels(pred, top_k):
            pooled.append((-pred[lab], lab, i, lab in truth))
    if n_pos == 0:
        raise UndefinedMetricError("GAP is undefined without ground-truth positives")
    pooled.sort(key=lambda item: item[:3])
    hits = 0
    total = 0.0
    for rank, item in enumerate(pooled, start=1):
        if item[3]:
            hits += 1
            total += hits / rank
    return total / n_pos


def _label_ap(scored: list[tuple[float, int, bool]], n_pos: int) -> float:
    scored.sort(key=lambda item: (-item[0], item[1]))
    hits = 0
    total = 0.0
    for rank, (_, _, positive) in enumerate(scored, start=1):
        if positive:
            hits += 1
            total += hits / rank
    return total / n_pos


def mean_average_precision(
    preds: Sequence[Prediction], truths: Sequence[Iterable[int]], stats: dict | None = None
) -> float:
    """Per-label AP across examples, averaged over labels with a positive.

    An example that carries no score for a label is treated as not having
    retrieved it: a positive there still counts in that label's denominator.
    """
    _check_lengths(preds, truths)
    truths = [set(t) for t in truths]
    positives: dict[int, int] = {}
    for t in truths:
        for lab in t:
            positives[lab] = positives.get(lab, 0) + 1
    scored: dict[int, list] = {lab: [] for lab in positives}
    skipped = set()
    for i, (pred, t) in enumerate(zip(preds, truths)):
        for lab, s in pred.items():
            if lab in scored:
                scored[lab].append((s, i, lab in t))
            else:
                skipped.add(lab)
    if stats is not None:
        stats["map_labels_used"] = len(positives)
        stats["map_labels_skipped"] = len(skipped)
    if not positives:
        raise UndefinedMetricError("MAP is undefined when no label has a positive")
    aps = [_label_ap(scored[lab], positives[lab]) for lab in sorted(positives)]
    return float(sum(aps) / len(aps))


def perr(
    preds: Sequence[Prediction], truths: Sequence[Iterable[int]], stats: dict | None = None
) -> float:
    """Precision among each example's top-g labels, g = its truth count."""
    _check_lengths(preds, truths)
    vals = []
    for pred, truth in zip(preds, truths):
        truth = set(truth)
        g = len(truth)
        if g == 0:
            continue
        top = ranked_labels(pred, g)
        vals.append(sum(lab in truth for lab in top) / g)
    if stats is not None:
        stats["perr_examples_used"] = len(vals)
        stats["perr_examples_skipped"] = len(preds) - len(vals)
    if not vals:
        raise UndefinedMetricError("PERR is undefined when no example has ground truth")
    return float(sum(vals) / len(vals))


def hit_at_1(preds: Sequence[Prediction], truths: Sequence[Iterable[int]]) -> float:
    _check_lengths(preds, truths)
    if not preds:
        raise UndefinedMetricError("Hit@1 is undefined for an empty corpus")
    hits = 0
    for pred, truth in zip(preds, truths):
        top = ranked_labels(pred, 1)
        hits += bool(top) and top[0] in set(truth)
    return hits / len(preds)


def predictions_from_scores(
    scores: np.ndarray, label_ids: Sequence[int] | None = None, top_k: int | None = DEFAULT_TOP_K
) -> list[dict[int, float]]:
    """Turn a dense (examples x labels) score matrix into sparse predictions.

    Only the ``top_k`` best labels of each row are kept; they are what the
    model "predicts" for the purpose of the per-level discard rule.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ids = list(range(scores.shape[1])) if label_ids is None else list(label_ids)
    out = []
    for row in scores:
        pred = {ids[j]: float(row[j]) for j in range(len(ids))}
        keep = ranked_labels(pred, top_k)
        out.append({lab: pred[lab] for lab in keep})
    return out


# -- reports ------------------------------------------------------------------------------


@dataclass
class MetricsRow:
    scope: str
    n_examples: int
    values: dict[str, float]
    std: dict[str, float] = field(default_factory=dict)

    def error(self, metric: str) -> float:
        v = self.values.get(metric, math.nan)
        return math.nan if math.isnan(v) else error_rate(v)

    def error_std(self, metric: str) -> float:
        # std of 100*(1-x) is 100*std(x)
        return 100.0 * self.std.get(metric, math.nan)


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    meta: dict = field(default_factory=dict)

    def row(self, scope: str) -> MetricsRow:
        for r in self.rows:
            if r.scope == scope:
                return r
        raise KeyError(scope)

    @property
    def scopes(self) -> list[str]:
        return [r.scope for r in self.rows]

    def to_records(self) -> list[dict]:
        recs = []
        for r in self.rows:
            for m in METRICS:
                recs.append(
                    {
                        "scope": r.scope,
                        "metric": m,
                        "n_examples": r.n_examples,
                        "value": r.values.get(m, math.nan),
                        "error": r.error(m),
                        "error_std": r.error_std(m),
                    }
                )
        return recs


def compute_all(preds, truths, top_k: int = DEFAULT_TOP_K, stats: dict | None = None) -> dict[str, float]:
    """All four metrics; NaN where a metric is undefined for the data."""
    fns = {
        "gap": lambda: global_average_precision(preds, truths, top_k),
        "map": lambda: mean_average_precision(preds, truths, stats),
        "perr": lambda: perr(preds, truths, stats),
        "hit1": lambda: hit_at_1(preds, truths),
    }
    out = {}
    for name, fn in fns.items():
        try:
            out[name] = fn()
        except UndefinedMetricError:
            out[name] = math.nan
    return out


def _restricted(preds, truths, keep_label) -> tuple[list, list]:
    """Restrict to labels passing ``keep_label``; drop examples left empty on both sides."""
    p_out, t_out = [], []
    for pred, truth in zip(preds, truths):
        p = {lab: s for lab, s in pred.items() if keep_label(lab)}
        t = {lab for lab in truth if keep_label(lab)}
        if p or t:
            p_out.append(p)
            t_out.append(t)
    return p_out, t_out


def overall_row(preds, truths, top_k: int = DEFAULT_TOP_K) -> MetricsRow:
    _check_lengths(preds, truths)
    return MetricsRow("overall", len(preds), compute_all(preds, truths, top_k))


def per_level_report(
    preds: Sequence[Prediction],
    truths: Sequence[Iterable[int]],
    taxonomy: Taxonomy,
    top_k: int = DEFAULT_TOP_K,
) -> list[MetricsRow]:
    """One row per level 0..3, evaluating only that level's labels.

    Examples with neither a prediction nor a truth at the level are dropped.
    """
    _check_lengths(preds, truths)
    rows = []
    for level in range(MAX_LEVELS):
        p, t = _restricted(preds, truths, lambda lab, lv=level: taxonomy.level(lab) == lv)
        values = compute_all(p, t, top_k) if p else {m: math.nan for m in METRICS}
        rows.append(MetricsRow(f"level{level}", len(p), values))
    return rows


def per_category_report(
    preds: Sequence[Prediction],
    truths: Sequence[Iterable[int]],
    taxonomy: Taxonomy,
    top_k: int = DEFAULT_TOP_K,
) -> list[MetricsRow]:
    """One row per top-level category, evaluating labels in its subtree."""
    _check_lengths(preds, truths)
    rows = []
    for root in taxonomy.roots:
        subtree = taxonomy.descendants(root)
        p, t = _restricted(preds, truths, subtree.__contains__)
        values = compute_all(p, t, top_k) if p else {m: math.nan for m in METRICS}
        rows.append(MetricsRow(f"cat:{taxonomy.node(root).name}", len(p), values))
    return rows


def build_report(preds, truths, taxonomy: Taxonomy, top_k: int = DEFAULT_TOP_K) -> MetricsReport:
    stats: dict = {}
    overall = MetricsRow("overall", len(preds), compute_all(preds, truths, top_k, stats))
    rows = [overall, *per_level_report(preds, truths, taxonomy, top_k)]
    rows += per_category_report(preds, truths, taxonomy, top_k)
    return MetricsReport(rows, meta={"top_k": top_k, **stats})
