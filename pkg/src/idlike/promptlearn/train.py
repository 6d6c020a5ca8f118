"""Prompt optimization against a frozen backend."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..embedcore import SimilarityRow
from ..encoder import EncoderBackend
from ..errors import ConfigError, DivergenceDetected, EmptyInput, GradientUnsupported, NoOodPrompts, TooFewPrompts
from ..miner import MinedDatasets
from .losses import OUT_LOSS_FORMS, RATIO_B, LossWeights, loss_div_grad, loss_in_grad, loss_out_grad
from .prompts import PromptSet, prompt_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 0.005
    batch_size: int = 1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    out_loss_form: str = RATIO_B

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.out_loss_form not in OUT_LOSS_FORMS:
            raise ConfigError(f"out_loss_form must be one of {OUT_LOSS_FORMS}")


class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(self, params, lr=0.005, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def objective(ps: PromptSet, backend: EncoderBackend, id_items, ood_items, w: LossWeights,
              form: str = RATIO_B, with_grad: bool = True):
    """Total loss on one batch.

    ``id_items`` is a list of ``(image_embedding, label)``; ``ood_items`` a
    list of image embeddings.  Each loss term is averaged over its items; a
    term with no items contributes 0.  The diversity term is evaluated on
    the current OOD prompt features whenever ``lambda_div > 0``.

    Returns ``(total, parts, (d_id_ctx, d_ood_ctx))``; the gradient tuple
    is ``None`` when ``with_grad`` is false.
    """
    if with_grad:
        f_in, f_out, vjp = prompt_features(ps, backend, with_vjp=True)
    else:
        f_in, f_out = prompt_features(ps, backend)
    g_in = np.zeros_like(f_in)
    g_out = np.zeros_like(f_out)
    parts = {"l_in": None, "l_out": None, "l_div": None}
    total = 0.0

    if id_items:
        acc = 0.0
        for z, y in id_items:
            row = SimilarityRow(f_in @ z, f_out @ z)
            v, d_in, d_out = loss_in_grad(row, int(y), w.tau)
            acc += v
            g_in += np.outer(d_in, z) / len(id_items)
            g_out += np.outer(d_out, z) / len(id_items)
        parts["l_in"] = acc / len(id_items)
        total += parts["l_in"]

    if ood_items and w.lambda_out > 0:
        if ps.C < 1:
            raise NoOodPrompts("outlier items present but the prompt set has no OOD prompts")
        acc = 0.0
        scale = w.lambda_out / len(ood_items)
        for z in ood_items:
            row = SimilarityRow(f_in @ z, f_out @ z)
            v, d_in, d_out = loss_out_grad(row, w.tau, form)
            acc += v
            g_in += scale * np.outer(d_in, z)
            g_out += scale * np.outer(d_out, z)
        parts["l_out"] = acc / len(ood_items)
        total += w.lambda_out * parts["l_out"]

    if w.lambda_div > 0:
        v, d_f = loss_div_grad(f_out)
        parts["l_div"] = v
        total += w.lambda_div * v
        g_out += w.lambda_div * d_f

    grads = vjp(g_in, g_out) if with_grad else None
    return total, parts, grads


def interleaved_stream(n_in: int, n_out: int, seed: int, epoch: int) -> list[tuple[str, int]]:
    """Epoch order: shuffled ID and outlier indices, alternating ID/outlier."""
    rng = np.random.default_rng([int(seed), int(epoch)])
    perm_in = rng.permutation(n_in)
    perm_out = rng.permutation(n_out)
    stream = []
    for k in range(max(n_in, n_out)):
        if k < n_in:
            stream.append(("in", int(perm_in[k])))
        if k < n_out:
            stream.append(("out", int(perm_out[k])))
    return stream


def train(mined: MinedDatasets, ps: PromptSet, backend: EncoderBackend, tc: TrainConfig,
          w: LossWeights, progress=None):
    """Optimize the context vectors of ``ps`` (a copy; the input is untouched).

    Returns ``(trained_prompts, history)`` where ``history`` holds one dict
    per optimizer step.
    """
    if not backend.differentiable_text:
        raise GradientUnsupported(f"backend {backend.name} cannot be trained through")
    if not mined.d_in and not mined.d_out:
        raise EmptyInput("mined datasets are empty")
    if w.lambda_div > 0 and ps.C < 2:
        raise TooFewPrompts("lambda_div > 0 needs at least 2 OOD prompts")
    if w.lambda_out > 0 and mined.d_out and ps.C < 1:
        raise NoOodPrompts("lambda_out > 0 needs at least one OOD prompt")

    z_in = mined.in_embeddings() if mined.d_in else np.zeros((0, backend.dim))
    y_in = mined.in_labels() if mined.d_in else np.zeros(0, dtype=int)
    z_out = mined.out_embeddings() if mined.d_out else np.zeros((0, backend.dim))
    if y_in.size and (y_in.min() < 0 or y_in.max() >= ps.K):
        raise ConfigError("mined labels do not match the prompt set's classes")

    checksum = backend.checksum()
    ps = ps.copy()
    opt = AdamW([ps.id_ctx, ps.ood_ctx], lr=tc.learning_rate, betas=(tc.beta1, tc.beta2),
                eps=tc.eps, weight_decay=tc.weight_decay)
    history = []
    step = 0
    for epoch in range(tc.epochs):
        stream = interleaved_stream(len(z_in), len(z_out), tc.seed, epoch)
        for start in range(0, len(stream), tc.batch_size):
            batch = stream[start : start + tc.batch_size]
            id_items = [(z_in[i], y_in[i]) for kind, i in batch if kind == "in"]
            ood_items = [z_out[i] for kind, i in batch if kind == "out"]
            total, parts, (d_id, d_ood) = objective(ps, backend, id_items, ood_items, w, tc.out_loss_form)
            record = {"step": step, "epoch": epoch,
                      "kind": "in" if not ood_items else "out" if not id_items else "mixed",
                      **parts, "total": total}
            history.append(record)
            if not math.isfinite(total) or not (np.all(np.isfinite(d_id)) and np.all(np.isfinite(d_ood))):
                raise DivergenceDetected(f"non-finite loss at step {step}", history)
            opt.step([d_id, d_ood])
            step += 1
            if progress is not None:
                progress(record)
        log.info("epoch %d done: last total loss %.4f", epoch, history[-1]["total"])

    if backend.checksum() != checksum:
        raise RuntimeError("backend parameters changed during training")
    return ps, history
