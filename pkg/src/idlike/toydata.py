"""Procedurally generated 32x32 grayscale classes for offline runs.

Each class is a smooth intensity field, a fixed combination of the
low-order terms x, y, x^2, y^2, xy (oriented ramps, bowls, saddles ...).
Images jitter the coefficients, shift the field, and add pixel noise.
Smooth fields are used because a crop of one is again a similar field,
which keeps crop-level training meaningful for an encoder without any
built-in invariances.

``ID_CLASSES`` are in-distribution; ``HELD_OUT_CLASSES`` never appear in
training and form the OOD test set.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .encoder import ImageRef

SIZE = 32

# coefficients over (x, y, x^2, y^2, xy)
FIELDS = {
    "ramp_east": (1, 0, 0, 0, 0),
    "ramp_north": (0, 1, 0, 0, 0),
    "ramp_west": (-1, 0, 0, 0, 0),
    "ramp_south": (0, -1, 0, 0, 0),
    "bowl": (0, 0, 1, 1, 0),
    "dome": (0, 0, -1, -1, 0),
    "saddle": (0, 0, 1, -1, 0),
    "twist": (0, 0, 0, 0, 1),
    # held out
    "ramp_northeast": (1, 1, 0, 0, 0),
    "ridge": (0, 0, 1, 0, 0),
    "valley": (0, 0, 0, -1, 0),
    "counter_twist": (0, 0, 0, 0, -1),
}
ID_CLASSES = ("ramp_east", "ramp_north", "ramp_west", "ramp_south", "bowl", "dome", "saddle", "twist")
HELD_OUT_CLASSES = ("ramp_northeast", "ridge", "valley", "counter_twist")


def pattern(name: str, rng: np.random.Generator, size: int = SIZE,
            jitter: float = 0.25, noise: float = 0.05) -> np.ndarray:
    """One image of class ``name`` with values in [0, 1]."""
    if name not in FIELDS:
        raise KeyError(f"unknown toy class {name!r}")
    c = np.asarray(FIELDS[name], dtype=np.float64)
    c = c / np.linalg.norm(c) + rng.normal(0.0, jitter, 5)
    y, x = np.mgrid[-1 : 1 : size * 1j, -1 : 1 : size * 1j]
    x = x + rng.uniform(-0.2, 0.2)
    y = y + rng.uniform(-0.2, 0.2)
    f = c[0] * x + c[1] * y + c[2] * (x * x - 1 / 3) + c[3] * (y * y - 1 / 3) + c[4] * x * y
    f = f / (np.abs(f).max() + 1e-9)
    return np.clip(0.5 + 0.4 * f + rng.normal(0.0, noise, f.shape), 0.0, 1.0)


def make_samples(classes, per_class: int, seed: int, size: int = SIZE) -> list[tuple[ImageRef, str]]:
    """``per_class`` images for each class, class-major order."""
    out = []
    for name in classes:
        rng = np.random.default_rng([int(seed), list(FIELDS).index(name)])
        for j in range(per_class):
            out.append((ImageRef(pattern(name, rng, size), ident=f"{name}/{j:03d}"), name))
    return out


TOY_CONFIG = """\
# toy end-to-end configuration (paths relative to this file)
data.id_train = id_train.tsv
data.id_test = id_test.tsv
data.ood.held_out = ood_held_out.tsv
encoder.kind = toy
encoder.seed = 0
encoder.dim = 64
encoder.input_size = 16
miner.M = 64
miner.Q = 8
miner.seed = 0
prompts.C = 16
prompts.L = 8
loss.lambda_out = 0.3
loss.lambda_div = 0.2
loss.tau = 0.01
train.lr = 0.005
train.epochs = 3
train.seed = 0
train.out_loss_form = ratio_b
run.shots = 4
run.seed = 0
run.output_dir = out
"""


def write_toy_dataset(root, train_per_class: int = 12, test_per_class: int = 25, seed: int = 0) -> Path:
    """Write images (``.npy``), manifests and ``toy.cfg`` under ``root``.

    Returns the config path.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)

    def dump(samples, split, labeled):
        lines = []
        for img, name in samples:
            rel = Path("images") / f"{split}_{img.ident.replace('/', '_')}.npy"
            np.save(root / rel, img.pixels)
            lines.append(f"{rel.as_posix()}\t{name}" if labeled else rel.as_posix())
        (root / f"{split}.tsv").write_text("\n".join(lines) + "\n")

    dump(make_samples(ID_CLASSES, train_per_class, seed), "id_train", True)
    dump(make_samples(ID_CLASSES, test_per_class, seed + 1), "id_test", True)
    dump(make_samples(HELD_OUT_CLASSES, test_per_class * 2, seed + 2), "ood_held_out", False)
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CONFIG)
    return cfg
