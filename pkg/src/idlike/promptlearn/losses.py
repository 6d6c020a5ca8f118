"""Training objectives over similarity rows, with analytic gradients.

Notation: ``A = sum_k exp(s_in_k / tau)``, ``B = sum_c exp(s_out_c / tau)``.
Every ratio is evaluated through log-sum-exps and softplus.

* in-distribution cross-entropy: ``-log(exp(s_y / tau) / (A + B))``
* outlier loss, ``ratio_a``: ``-log(B / (A + B))``  (>= 0)
* outlier loss, ``ratio_b``: ``log(A / (A + B))``   (<= 0, the default)
* diversity: mean pairwise cosine among OOD prompt features
* total: ``l_in + lambda_out * l_out + lambda_div * l_div``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..embedcore import SimilarityRow, cosine_matrix, log_sum_exp
from ..errors import ConfigError, LabelOutOfRange, NoOodPrompts, NonPositiveTemperature, TooFewPrompts

RATIO_A = "ratio_a"
RATIO_B = "ratio_b"
OUT_LOSS_FORMS = (RATIO_A, RATIO_B)


@dataclass(frozen=True)
class LossWeights:
    lambda_out: float = 0.3
    lambda_div: float = 0.2
    tau: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise NonPositiveTemperature(f"tau must be positive, got {self.tau}")
        if self.lambda_out < 0 or self.lambda_div < 0:
            raise ConfigError("loss weights must be non-negative")


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def loss_in_grad(row: SimilarityRow, label: int, tau: float):
    """Value and gradients ``(d/d id_sims, d/d ood_sims)`` of the ID loss."""
    if not 0 <= label < row.K:
        raise LabelOutOfRange(f"label {label} outside 0..{row.K - 1}")
    logits = row.all_sims() / tau
    value = log_sum_exp(logits) - logits[label]
    g = _softmax(logits)
    g[label] -= 1.0
    g /= tau
    return max(value, 0.0), g[: row.K], g[row.K:]


def loss_in(row: SimilarityRow, label: int, tau: float) -> float:
    return loss_in_grad(row, label, tau)[0]


def loss_out_grad(row: SimilarityRow, tau: float, form: str = RATIO_B):
    if row.C < 1:
        raise NoOodPrompts("the outlier loss needs at least one OOD prompt")
    if form not in OUT_LOSS_FORMS:
        raise ConfigError(f"unknown outlier loss form {form!r}")
    a = row.id_sims / tau
    b = row.ood_sims / tau
    # log A - log B, then softplus / sigmoid: no cancellation when either side dominates
    d = log_sum_exp(a) - log_sum_exp(b)
    if form == RATIO_A:
        w = expit(d)  # A / (A + B)
        return float(np.logaddexp(0.0, d)), _softmax(a) * w / tau, -_softmax(b) * w / tau
    w = expit(-d)  # B / (A + B)
    return -float(np.logaddexp(0.0, -d)), _softmax(a) * w / tau, -_softmax(b) * w / tau

def loss_out(row: SimilarityRow, tau: float, form: str = RATIO_B) -> float:
    return loss_out_grad(row, tau, form)[0]


def loss_div_grad(ood_feats):
    """Mean pairwise cosine over unordered pairs and its gradient w.r.t. the
    (unit-norm) features."""
    f = np.asarray(ood_feats, dtype=np.float64)
    C = f.shape[0]
    if C < 2:
        raise TooFewPrompts(f"diversity needs at least 2 OOD prompts, got {C}")
    n_pairs = C * (C - 1) / 2
    sims = cosine_matrix(f, f)
    value = (sims.sum() - np.trace(sims)) / 2 / n_pairs
    grad = (f.sum(axis=0, keepdims=True) - f) / n_pairs
    return float(np.clip(value, -1.0, 1.0)), grad


def loss_div(ood_feats) -> float:
    return loss_div_grad(ood_feats)[0]


def total_loss(l_in: float, l_out: float, l_div: float, w: LossWeights) -> float:
    return l_in + w.lambda_out * l_out + w.lambda_div * l_div
