"""Run configuration: a flat ``key = value`` file with dotted keys.

Lines starting with ``#`` are comments.  OOD test sets are declared one
per key as ``data.ood.<name> = manifest.tsv``.  Relative paths resolve
against the config file's directory (or the working directory for
command-line overrides).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError, MissingFile
from ..miner import MinerConfig
from ..promptlearn import INIT_STD, LossWeights, TrainConfig

OOD_PREFIX = "data.ood."


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default); "path" values are resolved, None means required
SCHEMA = {
    "data.id_train": ("path", None),
    "data.id_test": ("path", None),
    "encoder.kind": (str, "toy"),
    "encoder.seed": (int, 0),
    "encoder.dim": (int, 64),
    "encoder.input_size": (int, 16),
    "encoder.url": (str, ""),
    "miner.M": (int, 256),
    "miner.Q": (int, 32),
    "miner.seed": (int, 0),
    "miner.scale_min": (float, 0.1),
    "miner.scale_max": (float, 1.0),
    "miner.workers": (int, 1),
    "prompts.C": (int, 100),
    "prompts.L": (int, 16),
    "prompts.init_std": (float, INIT_STD),
    "loss.lambda_out": (float, 0.3),
    "loss.lambda_div": (float, 0.2),
    "loss.tau": (float, 0.01),
    "train.lr": (float, 0.005),
    "train.epochs": (int, 3),
    "train.batch_size": (int, 1),
    "train.weight_decay": (float, 0.0),
    "train.seed": (int, 0),
    "train.out_loss_form": (str, "ratio_b"),
    "run.shots": (int, 4),
    "run.seed": (int, 0),
    "run.output_dir": ("path", "out"),
    "run.target_tpr": (float, 0.95),
    "run.cache": (_bool, True),
}


def is_known_key(key: str) -> bool:
    return key in SCHEMA or (key.startswith(OOD_PREFIX) and len(key) > len(OOD_PREFIX))


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not is_known_key(key):
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    id_train: Path
    id_test: Path
    ood_tests: dict[str, Path]
    encoder: dict
    miner: MinerConfig
    train: TrainConfig
    loss: LossWeights
    C: int
    L: int
    init_std: float
    shots: int
    seed: int
    output_dir: Path
    target_tpr: float = 0.95
    workers: int = 1
    use_cache: bool = True
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def tau(self) -> float:
        return self.loss.tau

    def validate(self) -> "RunConfig":
        for p in (self.id_train, self.id_test, *self.ood_tests.values()):
            if not p.is_file():
                raise MissingFile(f"manifest not found: {p}")
        return self

    def as_dict(self) -> dict:
        """Normalized key/value view, used to stamp artifacts."""
        return dict(sorted(self.raw.items()))


def build_config(values: dict[str, str], base_dirs: dict[str, Path] | None = None,
                 default_base: Path | None = None) -> RunConfig:
    """Typed config from raw strings.  ``base_dirs`` maps a key to the
    directory its relative path is resolved against; other keys use
    ``default_base`` (the working directory if unset)."""
    base_dirs = dict(base_dirs or {})
    for key in SCHEMA:
        base_dirs.setdefault(key, default_base or Path.cwd())
    typed, raw = {}, {}
    for key, (kind, default) in SCHEMA.items():
        if key not in values:
            if default is None:
                raise ConfigError(f"missing required key {key!r}")
            s = str(default)
        else:
            s = values[key]
        raw[key] = s
        typed[key] = _convert(key, kind, s, base_dirs)
    ood = {}
    for key in sorted(k for k in values if k.startswith(OOD_PREFIX)):
        ood[key[len(OOD_PREFIX):]] = _convert(key, "path", values[key], base_dirs)
        raw[key] = values[key]
    for name in ood:
        if name in ("id", "Average"):
            raise ConfigError(f"OOD set name {name!r} is reserved")
    if not ood:
        raise ConfigError(f"at least one '{OOD_PREFIX}<name>' manifest is required")
    if typed["encoder.kind"] not in ("toy", "adapter"):
        raise ConfigError("encoder.kind must be 'toy' or 'adapter'")
    if typed["encoder.kind"] == "adapter" and not typed["encoder.url"]:
        raise ConfigError("encoder.kind = adapter needs encoder.url")
    if typed["run.shots"] < 1:
        raise ConfigError("run.shots must be >= 1")
    if typed["prompts.L"] < 1 or typed["prompts.C"] < 0:
        raise ConfigError("prompts.L must be >= 1 and prompts.C >= 0")
    try:
        miner = MinerConfig(M=typed["miner.M"], Q=typed["miner.Q"],
                            scale_range=(typed["miner.scale_min"], typed["miner.scale_max"]),
                            seed=typed["miner.seed"])
        train = TrainConfig(epochs=typed["train.epochs"], learning_rate=typed["train.lr"],
                            batch_size=typed["train.batch_size"], weight_decay=typed["train.weight_decay"],
                            seed=typed["train.seed"], out_loss_form=typed["train.out_loss_form"])
        loss = LossWeights(typed["loss.lambda_out"], typed["loss.lambda_div"], typed["loss.tau"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        id_train=typed["data.id_train"],
        id_test=typed["data.id_test"],
        ood_tests=ood,
        encoder={"kind": typed["encoder.kind"], "seed": typed["encoder.seed"], "dim": typed["encoder.dim"],
                 "input_size": typed["encoder.input_size"], "url": typed["encoder.url"]},
        miner=miner, train=train, loss=loss,
        C=typed["prompts.C"], L=typed["prompts.L"], init_std=typed["prompts.init_std"],
        shots=typed["run.shots"], seed=typed["run.seed"], output_dir=typed["run.output_dir"],
        target_tpr=typed["run.target_tpr"], workers=typed["miner.workers"],
        use_cache=typed["run.cache"], raw=raw,
    )


def _convert(key, kind, s, base_dirs):
    if kind == "path":
        p = Path(os.path.expanduser(s))
        return p if p.is_absolute() else (base_dirs.get(key, Path.cwd()) / p)
    try:
        return kind(s)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {s!r}") from exc


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional) and apply ``overrides`` on top."""
    values, bases, home = {}, {}, None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"config file not found: {path}")
        values = parse_config_text(path.read_text(), str(path))
        home = path.parent.resolve()
        bases = {k: home for k in values}
    for key, value in (overrides or {}).items():
        if not is_known_key(key):
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
        bases[key] = Path.cwd()
    return build_config(values, bases, home)
