"""Vector math shared by every stage: normalization, cosine similarity,
temperature softmax and a max-shifted log-sum-exp."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    NonPositiveTemperature,
    NotUnitNorm,
    ZeroVector,
)

DEFAULT_DIM = 512
NORM_EPS = 1e-12
CLAMP_TOL = 1e-9


def normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise EmptyInput("normalize expects a non-empty 1-D vector")
    n = np.linalg.norm(v)
    if not n >= NORM_EPS:
        raise ZeroVector(f"cannot normalize vector with norm {n!r}")
    return v / n


def normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(~(n >= NORM_EPS)):
        raise ZeroVector("at least one row has (near) zero norm")
    return m / n


def _clamp(value: np.ndarray | float):
    over = np.abs(value) - 1.0
    if np.any(over > CLAMP_TOL):
        raise NotUnitNorm(
            f"cosine value exceeds 1 by {float(np.max(over)):.3g}; inputs are not unit-norm"
        )
    return np.clip(value, -1.0, 1.0)


def cosine_similarity(u, v) -> float:
    """Cosine similarity of two unit-norm embeddings (a plain dot product).

    Drift past [-1, 1] smaller than 1e-9 is clamped; anything larger means
    the inputs were never normalized and raises ``NotUnitNorm``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionMismatch(f"shapes {u.shape} and {v.shape} differ")
    return float(_clamp(float(np.dot(u, v))))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` (n, d) and ``b`` (m, d)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"dims {a.shape[-1]} and {b.shape[-1]} differ")
    return _clamp(a @ b.T)


def log_sum_exp(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if xs.size == 0:
        raise EmptyInput("log_sum_exp of an empty vector")
    m = np.max(xs)
    if not np.isfinite(m):
        # +inf, all -inf, or nan: the result is m itself
        return float(m)
    return float(m + np.log(np.sum(np.exp(xs - m))))


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau!r}")
    return tau


def log_softmax(sims, tau: float = 1.0) -> np.ndarray:
    sims = np.asarray(sims, dtype=np.float64).ravel()
    if sims.size == 0:
        raise EmptyInput("softmax of an empty vector")
    x = sims / _check_tau(tau)
    return x - log_sum_exp(x)


def softmax_probs(sims, tau: float = 1.0) -> np.ndarray:
    """p_k = exp(s_k/tau) / sum_j exp(s_j/tau), evaluated in shifted log space."""
    return np.exp(log_softmax(sims, tau))


@dataclass(frozen=True)
class SimilarityRow:
    """Similarities of one image to the K ID prompts and the C OOD prompts."""

    id_sims: np.ndarray
    ood_sims: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        ids = np.asarray(self.id_sims, dtype=np.float64).ravel()
        oods = np.asarray(self.ood_sims, dtype=np.float64).ravel()
        if ids.size < 1:
            raise EmptyInput("a similarity row needs at least one ID similarity")
        for arr in (ids, oods):
            if arr.size and np.max(np.abs(arr)) > 1.0 + CLAMP_TOL:
                raise NotUnitNorm("similarities must lie in [-1, 1]")
        object.__setattr__(self, "id_sims", ids)
        object.__setattr__(self, "ood_sims", oods)

    @property
    def K(self) -> int:
        return self.id_sims.size

    @property
    def C(self) -> int:
        return self.ood_sims.size

    def all_sims(self) -> np.ndarray:
        return np.concatenate([self.id_sims, self.ood_sims])


def similarity_row(image_emb, id_feats, ood_feats=None) -> SimilarityRow:
    """Build a SimilarityRow from one image embedding and prompt features."""
    z = np.asarray(image_emb, dtype=np.float64)
    ids = cosine_matrix(id_feats, z)[:, 0]
    if ood_feats is None or len(ood_feats) == 0:
        oods = np.zeros(0)
    else:
        oods = cosine_matrix(ood_feats, z)[:, 0]
    return SimilarityRow(ids, oods)
