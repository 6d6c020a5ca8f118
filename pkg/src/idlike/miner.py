"""Mining ID-like outliers from random crops of the few-shot ID images.

Each source image is cropped ``M`` times; crops are ranked by cosine
similarity to the zero-shot text embedding of the image's own class.  The
``Q`` most similar crops become labeled ID training items, the ``Q`` least
similar become unlabeled outliers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedcore import cosine_matrix
from .encoder import DEFAULT_TEMPLATE, EncoderBackend, ImageRef, zero_shot_embeddings
from .errors import ConfigError, DegenerateImage, EmptyInput, InsufficientCrops, LabelOutOfRange

MAX_ATTEMPTS = 100

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MinerConfig:
    M: int = 256
    Q: int = 32
    scale_range: tuple = (0.1, 1.0)
    aspect_range: tuple = (3 / 4, 4 / 3)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        alo, ahi = self.aspect_range
        if self.M < 1 or self.Q < 1:
            raise ConfigError("M and Q must be positive")
        if 2 * self.Q > self.M:
            raise ConfigError(f"need 2*Q <= M, got Q={self.Q}, M={self.M}")
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        if not 0 < alo <= ahi:
            raise ConfigError(f"aspect_range must satisfy 0 < lo <= hi, got {self.aspect_range}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def crop_rng(seed: int, image_index: int) -> np.random.Generator:
    # keyed by image index so results do not depend on processing order
    return np.random.default_rng([int(seed), int(image_index)])


def _center_box(H: int, W: int, aspect_range) -> tuple:
    alo, ahi = aspect_range
    ratio = W / H
    if ratio < alo:
        w, h = W, int(round(W / alo))
    elif ratio > ahi:
        h, w = H, int(round(H * ahi))
    else:
        w, h = W, H
    w, h = min(w, W), min(h, H)
    if w < 1 or h < 1:
        raise DegenerateImage(f"no valid crop in a {W}x{H} image")
    return ((W - w) // 2, (H - h) // 2, w, h)


def crop_boxes(height: int, width: int, cfg: MinerConfig, image_index: int) -> list[tuple]:
    """``cfg.M`` boxes ``(x, y, w, h)``: area fraction uniform in
    ``scale_range``, aspect ratio log-uniform in ``aspect_range``."""
    rng = crop_rng(cfg.seed, image_index)
    area = height * width
    log_lo, log_hi = math.log(cfg.aspect_range[0]), math.log(cfg.aspect_range[1])
    boxes = []
    for _ in range(cfg.M):
        for _ in range(MAX_ATTEMPTS):
            target = area * rng.uniform(*cfg.scale_range)
            ratio = math.exp(rng.uniform(log_lo, log_hi))
            w = int(round(math.sqrt(target * ratio)))
            h = int(round(math.sqrt(target / ratio)))
            if 0 < w <= width and 0 < h <= height:
                x = int(rng.integers(0, width - w + 1))
                y = int(rng.integers(0, height - h + 1))
                boxes.append((x, y, w, h))
                break
        else:
            boxes.append(_center_box(height, width, cfg.aspect_range))
    return boxes


def generate_crops(img: ImageRef, cfg: MinerConfig, image_index: int) -> list[ImageRef]:
    """M random crops of ``img``; the encoder resizes each to its input size."""
    return [img.with_box(b) for b in crop_boxes(img.height, img.width, cfg, image_index)]


def filter_crops(crop_embs, class_prompt_emb, Q: int) -> tuple[list[int], list[int]]:
    """Indices of the Q most and Q least similar crops.

    Ties go to the lower crop index.  The bottom set is drawn from what the
    top set left over, so the two never overlap.
    """
    sims = cosine_matrix(crop_embs, class_prompt_emb)[:, 0]
    return rank_by_similarity(sims, Q)


def rank_by_similarity(sims, Q: int) -> tuple[list[int], list[int]]:
    sims = np.asarray(sims, dtype=np.float64)
    M = sims.size
    if M < 2 * Q:
        raise InsufficientCrops(f"need at least 2*Q={2 * Q} crops, got {M}")
    idx = np.arange(M)
    top = np.lexsort((idx, -sims))[:Q]
    rest = np.setdiff1d(idx, top)
    bottom = rest[np.lexsort((rest, sims[rest]))][:Q]
    return top.tolist(), bottom.tolist()


@dataclass(frozen=True)
class MinedEntry:
    source_index: int
    crop_index: int
    crop_box: tuple
    sim: float
    embedding: np.ndarray
    label: int | None = None


@dataclass
class MinedDatasets:
    d_in: list = field(default_factory=list)
    d_out: list = field(default_factory=list)

    def in_embeddings(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.d_in])

    def out_embeddings(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.d_out])

    def in_labels(self) -> np.ndarray:
        return np.array([e.label for e in self.d_in], dtype=int)

    def entries(self):
        """All entries, ID first, in the order they are persisted."""
        return [*self.d_in, *self.d_out]


def _mine_one(i, img, label, class_emb, backend, cfg):
    try:
        crops = generate_crops(img, cfg, i)
        embs = backend.encode_images(crops)
        sims = cosine_matrix(embs, class_emb)[:, 0]
        top, bottom = rank_by_similarity(sims, cfg.Q)
    except Exception:
        log.error("mining failed for few-shot sample %d (%s); aborting", i, img.ident)
        raise
    d_in = [MinedEntry(i, j, crops[j].crop_box, float(sims[j]), embs[j], label) for j in top]
    d_out = [MinedEntry(i, j, crops[j].crop_box, float(sims[j]), embs[j]) for j in bottom]
    return d_in, d_out


def build_mined_datasets(fewshot: Sequence, backend: EncoderBackend, cfg: MinerConfig,
                         class_names: Sequence[str], templates=(DEFAULT_TEMPLATE,),
                         workers: int = 1) -> MinedDatasets:
    """Crop, encode and filter every few-shot ``(ImageRef, label)`` pair.

    The reference text embedding is the zero-shot prompt of the sample's own
    ground-truth class.  Results are merged in source order.
    """
    if len(fewshot) == 0:
        raise EmptyInput("no few-shot samples to mine")
    K = len(class_names)
    for img, label in fewshot:
        if label is None or not 0 <= int(label) < K:
            raise LabelOutOfRange(f"label {label!r} outside 0..{K - 1}")
    class_embs = zero_shot_embeddings(backend, class_names, templates)

    def job(i):
        img, label = fewshot[i]
        return _mine_one(i, img, int(label), class_embs[int(label)], backend, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(fewshot))))
    else:
        parts = [job(i) for i in range(len(fewshot))]
    mined = MinedDatasets()
    for d_in, d_out in parts:
        mined.d_in.extend(d_in)
        mined.d_out.extend(d_out)
    return mined
