"""Learnable ID and OOD prompts.

An ID prompt is ``[V]_1 ... [V]_L [CLASS]``: L learnable context vectors and
the fixed class-name token.  An OOD prompt is the L context vectors alone.
Every prompt owns its own context (no sharing across classes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..encoder import EncoderBackend, TokenSequence
from ..errors import ConfigError, GradientUnsupported

INIT_STD = 0.02


@dataclass
class PromptSet:
    id_ctx: np.ndarray  # (K, L, e)
    ood_ctx: np.ndarray  # (C, L, e)
    class_tokens: np.ndarray  # (K, e)
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.id_ctx = np.asarray(self.id_ctx, dtype=np.float64)
        self.ood_ctx = np.asarray(self.ood_ctx, dtype=np.float64)
        self.class_tokens = np.asarray(self.class_tokens, dtype=np.float64)
        K, L, e = self.id_ctx.shape
        if K < 1 or L < 1:
            raise ConfigError("need at least one ID prompt and one context token")
        if self.ood_ctx.size == 0:
            self.ood_ctx = np.zeros((0, L, e))
        elif self.ood_ctx.ndim != 3 or self.ood_ctx.shape[1:] != (L, e):
            raise ConfigError(f"OOD context shape {self.ood_ctx.shape} incompatible with {(L, e)}")
        if self.class_tokens.shape != (K, e):
            raise ConfigError(f"class tokens shape {self.class_tokens.shape} != {(K, e)}")
        if not self.class_names:
            self.class_names = [str(k) for k in range(K)]

    @property
    def K(self) -> int:
        return self.id_ctx.shape[0]

    @property
    def C(self) -> int:
        return self.ood_ctx.shape[0]

    @property
    def L(self) -> int:
        return self.id_ctx.shape[1]

    @property
    def text_context_dim(self) -> int:
        return self.id_ctx.shape[2]

    def id_sequences(self) -> list[TokenSequence]:
        return [TokenSequence(np.vstack([ctx, tok[None, :]]), class_slot=self.L)
                for ctx, tok in zip(self.id_ctx, self.class_tokens)]

    def ood_sequences(self) -> list[TokenSequence]:
        return [TokenSequence(ctx) for ctx in self.ood_ctx]

    def copy(self) -> "PromptSet":
        return PromptSet(self.id_ctx.copy(), self.ood_ctx.copy(), self.class_tokens.copy(),
                         list(self.class_names))


def init_prompts(class_names: Sequence[str], C: int, L: int, seed: int, backend: EncoderBackend,
                 std: float = INIT_STD) -> PromptSet:
    """Gaussian context vectors (zero mean, ``std``); class tokens from the
    backend vocabulary."""
    K = len(class_names)
    if K < 1 or C < 0 or L < 1:
        raise ConfigError(f"invalid prompt shape K={K}, C={C}, L={L}")
    e = backend.text_context_dim
    rng = np.random.default_rng(seed)
    id_ctx = rng.normal(0.0, std, (K, L, e))
    ood_ctx = rng.normal(0.0, std, (C, L, e))
    return PromptSet(id_ctx, ood_ctx, backend.token_vectors(list(class_names)), list(class_names))


def prompt_features(ps: PromptSet, backend: EncoderBackend, with_vjp: bool = False):
    """Text features of all prompts: ``(id_feats (K, d), ood_feats (C, d))``.

    With ``with_vjp`` a third element maps feature cotangents
    ``(G_id, G_ood)`` to context-vector gradients ``(d_id_ctx, d_ood_ctx)``;
    the class-token slot receives no gradient.
    """
    if with_vjp and not backend.differentiable_text:
        raise GradientUnsupported(f"backend {backend.name} cannot differentiate the text path")
    seqs = ps.id_sequences() + ps.ood_sequences()
    K, L = ps.K, ps.L
    if not with_vjp:
        emb = backend.encode_texts(seqs)
        return emb[:K], emb[K:]
    emb, vjp = backend.encode_texts(seqs, with_vjp=True)

    def ctx_vjp(g_id, g_ood):
        d = emb.shape[1]
        g = np.vstack([np.asarray(g_id, dtype=np.float64).reshape(K, d),
                       np.asarray(g_ood, dtype=np.float64).reshape(ps.C, d)])
        grads = vjp(g)
        d_id = np.stack([gr[:L] for gr in grads[:K]])
        d_ood = np.stack(grads[K:]) if ps.C else np.zeros_like(ps.ood_ctx)
        return d_id, d_ood

    return emb[:K], emb[K:], ctx_vjp
