"""Manifests, image loading and few-shot sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..encoder import ImageRef
from ..errors import EmptyManifest, InsufficientSamples, InvalidImage, MissingFile, UnknownLabel


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image: ImageRef
    label: int | None = None


def load_image(path: Path) -> np.ndarray:
    """Pixels in [0, 1].  ``.npy`` arrays are taken as-is (uint8 is scaled);
    anything else goes through Pillow and is converted to grayscale."""
    if path.suffix.lower() == ".npy":
        px = np.load(path, allow_pickle=False)
        if px.dtype == np.uint8:
            return px.astype(np.float64) / 255.0
        return np.asarray(px, dtype=np.float64)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise InvalidImage(f"cannot decode {path}: {exc}") from exc


def read_manifest(path) -> list[tuple[str, str | None]]:
    """``(path, label-or-None)`` per non-blank line; paths are as written."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) > 2:
            raise UnknownLabel(f"{path}: more than two tab-separated fields in {line!r}")
        label = parts[1].strip() if len(parts) == 2 and parts[1].strip() else None
        rows.append((parts[0].strip(), label))
    if not rows:
        raise EmptyManifest(f"manifest {path} has no entries")
    return rows


def class_table(manifest) -> list[str]:
    """Sorted distinct labels of a labeled manifest; index = class id."""
    return sorted({lab for _, lab in read_manifest(manifest) if lab is not None})


def ingest_dataset(manifest, class_names=None) -> tuple[list[Sample], list[str]]:
    """Load every manifest entry in order.

    With ``class_names`` given, labels must come from it (``UnknownLabel``
    otherwise); without it, the table is built from this manifest.  Returns
    ``(samples, class_names)``.
    """
    manifest = Path(manifest)
    rows = read_manifest(manifest)
    if class_names is None:
        class_names = sorted({lab for _, lab in rows if lab is not None})
    index = {name: i for i, name in enumerate(class_names)}
    samples = []
    for rel, lab in rows:
        p = Path(rel)
        if not p.is_absolute():
            p = manifest.parent / p
        if not p.is_file():
            raise MissingFile(f"image not found: {p} (listed in {manifest})")
        if lab is not None and lab not in index:
            raise UnknownLabel(f"label {lab!r} in {manifest} is not a known class")
        samples.append(Sample(rel, ImageRef(load_image(p), ident=rel),
                              None if lab is None else index[lab]))
    return samples, list(class_names)


def sample_fewshot(full, shots: int, seed: int, class_names=None) -> list:
    """``shots`` samples per class, uniformly without replacement.

    Each class draws one uniform key per member from
    ``default_rng([seed, class_index])``; the ``shots`` smallest keys win.
    Output is class-major, members in manifest order.  ``full`` holds
    ``Sample``s or ``(image, label)`` pairs.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(full):
        lab = _label(s)
        if lab is None:
            raise UnknownLabel(f"sample {i} has no label")
        by_class.setdefault(lab, []).append(i)
    out = []
    for c in sorted(by_class):
        members = by_class[c]
        if len(members) < shots:
            name = class_names[c] if class_names else str(c)
            raise InsufficientSamples(f"class {name!r} has {len(members)} samples, needs {shots}")
        keys = np.random.default_rng([int(seed), int(c)]).random(len(members))
        chosen = np.sort(np.argsort(keys, kind="stable")[:shots])
        out.extend(full[members[j]] for j in chosen)
    return out


def _label(s):
    return s.label if isinstance(s, Sample) else s[1]
