"""Test-time scoring, thresholding and classification.

Scores live in (0, 1), but at small temperatures they round to exactly 1.0
in float64 long before the underlying ordering stops carrying information.
Each score therefore has a ``*_logit`` twin (its log-odds, a strictly
increasing transform computed without cancellation); rank-based metrics
are computed on the twins.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .embedcore import SimilarityRow, log_sum_exp
from .errors import EmptyScores, NoOodPrompts, NonPositiveTemperature

DEFAULT_TAU = 0.01


def _tau(tau):
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau!r}")
    return float(tau)


def score_idlike_logit(row: SimilarityRow, tau: float = DEFAULT_TAU) -> float:
    """log(A / B): ID mass over OOD-prompt mass, in log space."""
    tau = _tau(tau)
    if row.C < 1:
        raise NoOodPrompts("the prompt-ratio score needs at least one OOD prompt")
    return log_sum_exp(row.id_sims / tau) - log_sum_exp(row.ood_sims / tau)


def score_idlike(row: SimilarityRow, tau: float = DEFAULT_TAU) -> float:
    """Share of exponentiated similarity mass held by the ID prompts,
    ``A / (A + B)``."""
    tau = _tau(tau)
    if row.C < 1:
        raise NoOodPrompts("the prompt-ratio score needs at least one OOD prompt")
    return float(np.exp(log_sum_exp(row.id_sims / tau) - log_sum_exp(row.all_sims() / tau)))


def _max_softmax_logit(x: np.ndarray) -> float:
    k = int(np.argmax(x))
    rest = np.delete(x, k)
    if rest.size == 0:
        return float("inf")
    return float(x[k] - log_sum_exp(rest))


def score_mcm(row: SimilarityRow, tau: float = DEFAULT_TAU) -> float:
    """Maximum temperature-scaled softmax over the ID similarities only."""
    x = row.id_sims / _tau(tau)
    return float(np.exp(np.max(x) - log_sum_exp(x)))


def score_mcm_logit(row: SimilarityRow, tau: float = DEFAULT_TAU) -> float:
    return _max_softmax_logit(row.id_sims / _tau(tau))


def score_msp(logit_row) -> float:
    x = np.asarray(logit_row, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyScores("empty logit row")
    return float(np.exp(np.max(x) - log_sum_exp(x)))


def score_msp_logit(logit_row) -> float:
    x = np.asarray(logit_row, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyScores("empty logit row")
    return _max_softmax_logit(x)


def classify(row: SimilarityRow) -> int:
    """Argmax over the ID similarities; ties resolve to the lowest index."""
    return int(np.argmax(row.id_sims))


def calibrate_gamma(id_scores, target_tpr: float = 0.95) -> float:
    """Largest threshold that still accepts at least ``target_tpr`` of the ID
    scores under the inclusive rule ``score >= gamma``.

    Always one of the observed scores; no interpolation.
    """
    s = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise EmptyScores("cannot calibrate on an empty score list")
    if not 0 < target_tpr <= 1:
        raise ValueError(f"target_tpr must be in (0, 1], got {target_tpr}")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    # accepting s[i:] keeps n - i scores; the feasible i form a prefix
    feasible = (n - np.arange(n)) / n >= target_tpr
    i = int(np.flatnonzero(feasible)[-1])
    return float(s[i])


class Verdict(str, enum.Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass(frozen=True)
class Detector:
    gamma: float
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        _tau(self.tau)


def detect(score: float, d: Detector) -> Verdict:
    return Verdict.ID if score >= d.gamma else Verdict.OOD


@dataclass
class ScoreRecord:
    sample_id: str
    sim_row: SimilarityRow
    score_idlike: float
    score_mcm: float
    score_msp: float
    predicted_class: int
    label: int | None = None
    logits: dict = field(default_factory=dict)

    def to_json(self, **extra) -> dict:
        out = {"sample_id": self.sample_id}
        if self.label is not None:
            out["label"] = int(self.label)
        out.update({
            "s_in": self.sim_row.id_sims.tolist(),
            "s_out": self.sim_row.ood_sims.tolist(),
            "score_idlike": self.score_idlike,
            "score_mcm": self.score_mcm,
            "score_msp": self.score_msp,
            "predicted_class": self.predicted_class,
        })
        out.update({f"logit_{k}": v for k, v in self.logits.items()})
        out.update(extra)
        return out


def score_record(sample_id: str, row: SimilarityRow, tau: float = DEFAULT_TAU,
                 label: int | None = None) -> ScoreRecord:
    """All scores for one sample.

    MSP treats the raw ID similarities as logits (unit temperature).  Without
    OOD prompts the prompt-ratio score takes its C -> 0 limit of 1.
    """
    if row.C:
        s_idlike, l_idlike = score_idlike(row, tau), score_idlike_logit(row, tau)
    else:
        s_idlike, l_idlike = 1.0, float("inf")
    return ScoreRecord(
        sample_id=sample_id,
        sim_row=row,
        score_idlike=s_idlike,
        score_mcm=score_mcm(row, tau),
        score_msp=score_msp(row.id_sims),
        predicted_class=classify(row),
        label=label,
        logits={"idlike": l_idlike, "mcm": score_mcm_logit(row, tau),
                "msp": score_msp_logit(row.id_sims)},
    )


def synthetic_idlike_scenario(K: int, C: int, seed: int, delta: float):
    """A pair of similarity rows for an ID image and an ID-like outlier.

    Both rows share the same ID similarities (hence the same maximum); the
    outlier's OOD-prompt similarities exceed the ID image's by ``delta``
    elementwise.  Other values are uniform in [-0.5, 0.5].
    """
    if K < 2 or C < 1 or not delta > 0:
        raise ValueError("need K >= 2, C >= 1 and delta > 0")
    rng = np.random.default_rng(seed)
    id_sims = rng.uniform(-0.5, 0.5, K)
    ood_of_id = rng.uniform(-0.5, 0.5, C)
    row_id = SimilarityRow(id_sims, ood_of_id)
    row_ood = SimilarityRow(id_sims.copy(), ood_of_id + delta)
    return row_id, row_ood
