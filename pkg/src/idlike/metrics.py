"""FPR at a fixed TPR, rank-based AUROC and ID accuracy.  ID is the positive
class throughout: higher scores mean "more in-distribution"."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .detect import calibrate_gamma
from .errors import EmptyScores, LengthMismatch


def _scores(xs, what):
    a = np.asarray(xs, dtype=np.float64).ravel()
    if a.size == 0:
        raise EmptyScores(f"{what} scores are empty")
    if np.any(np.isnan(a)):
        raise ValueError(f"{what} scores contain NaN")
    return a


def fpr_at_tpr(id_scores, ood_scores, target_tpr: float = 0.95) -> float:
    """Fraction of OOD scores accepted at the ``calibrate_gamma`` threshold."""
    ids = _scores(id_scores, "ID")
    oods = _scores(ood_scores, "OOD")
    gamma = calibrate_gamma(ids, target_tpr)
    return float(np.count_nonzero(oods >= gamma) / oods.size)


def auroc(id_scores, ood_scores) -> float:
    """P(id > ood) + 0.5 * P(id == ood), via the Mann-Whitney U statistic."""
    ids = _scores(id_scores, "ID")
    oods = _scores(ood_scores, "OOD")
    ranks = rankdata(np.concatenate([ids, oods]), method="average")
    u = ranks[: ids.size].sum() - ids.size * (ids.size + 1) / 2
    return float(u / (ids.size * oods.size))


def id_accuracy(records, labels) -> float:
    """Fraction of records whose ``predicted_class`` equals the label.

    ``records`` may be ScoreRecords, dicts with ``predicted_class``, or bare
    class indices.
    """
    records, labels = list(records), list(labels)
    if len(records) != len(labels):
        raise LengthMismatch(f"{len(records)} records vs {len(labels)} labels")
    if not records:
        raise EmptyScores("no records")

    def pred(r):
        if isinstance(r, dict):
            return int(r["predicted_class"])
        return int(getattr(r, "predicted_class", r))

    hits = sum(pred(r) == int(y) for r, y in zip(records, labels))
    return hits / len(records)


@dataclass(frozen=True)
class EvalResult:
    fpr_at_95: float
    auroc: float
    id_acc: float
    n_id: int
    n_ood: int

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(id_scores, ood_scores, predicted, labels, target_tpr: float = 0.95) -> EvalResult:
    return EvalResult(
        fpr_at_95=fpr_at_tpr(id_scores, ood_scores, target_tpr),
        auroc=auroc(id_scores, ood_scores),
        id_acc=id_accuracy(predicted, labels),
        n_id=len(id_scores),
        n_ood=len(ood_scores),
    )


def average_results(results) -> EvalResult:
    """Arithmetic mean of the metric fields; ``n_ood`` is the total."""
    results = list(results)
    if not results:
        raise EmptyScores("nothing to average")
    n = len(results)
    return EvalResult(
        fpr_at_95=sum(r.fpr_at_95 for r in results) / n,
        auroc=sum(r.auroc for r in results) / n,
        id_acc=sum(r.id_acc for r in results) / n,
        n_id=results[0].n_id,
        n_ood=sum(r.n_ood for r in results),
    )
