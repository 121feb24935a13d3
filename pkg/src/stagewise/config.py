"""Experiment configuration: flat key-value text files and validation.

Format: `key = value` lines grouped under `[section]` headers, `#` comments.
Unknown keys are rejected so typos fail loudly; every validation error names
the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .optim import OptimizerConfig

_SECTIONS = {
    "data": {"kind", "n", "classes", "noise", "separation", "seed",
             "images", "labels"},
    "model": {"arch", "width", "aux", "k", "stages"},
    "train": {"trainer", "epochs", "batch_size", "lr", "momentum",
              "weight_decay", "schedule", "decay_factor", "decay_period",
              "rm_alpha"},
    "async": {"m", "s", "slow_worker", "update_cap"},
    "run": {"seed", "out"},
    "sweep": {"param", "values", "positions", "seeds"},
}

TRAINERS = ("sync", "async", "sequential", "e2e")
AUX_CHOICES = ("cnn_aux", "mlp_aux", "mlp_sr_aux")


def parse_kv(text: str) -> dict[str, str]:
    """Flat `section.key -> value` mapping from the config text."""
    out = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got "
                              f"'{line}'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _SECTIONS[section]:
            raise ConfigError(f"line {lineno}: unknown key '{section}.{key}'")
        out[f"{section}.{key}"] = value
    return out


def _get(kv, key, cast, default=None, required=False):
    if key not in kv:
        if required:
            raise ConfigError(f"field '{key}': required but missing")
        return default
    try:
        if cast is bool:
            return kv[key].lower() in ("1", "true", "yes")
        return cast(kv[key])
    except ValueError:
        raise ConfigError(f"field '{key}': cannot parse '{kv[key]}' as "
                          f"{cast.__name__}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data_kind: str = "gridimg"
    n: int = 2000
    classes: int = 2
    noise: float = 0.5
    separation: float = 6.0
    data_seed: int | None = None
    images: str | None = None
    labels: str | None = None
    # model
    arch: str = "cifar6"
    width: int = 8
    aux: str = "mlp_aux"
    k: int = 6
    stages_text: tuple[str, ...] = ()
    # train
    trainer: str = "sync"
    epochs: int = 10
    batch_size: int = 32
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    # async
    m: int = 50
    s: float = 1.0
    slow_worker: int | None = None
    update_cap: int | None = None
    # run
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if self.trainer not in TRAINERS:
            raise ConfigError(f"field 'train.trainer': must be one of "
                              f"{TRAINERS}, got '{self.trainer}'")
        if self.data_kind == "idx":
            if not (self.images and self.labels):
                raise ConfigError("field 'data.images': idx data needs both "
                                  "images and labels paths")
        elif self.data_kind in ("blobs", "spirals", "gridimg"):
            if self.images or self.labels:
                raise ConfigError("field 'data.images': only valid with "
                                  "kind = idx (exactly one dataset source)")
            if self.n < 2 * self.classes:
                raise ConfigError(f"field 'data.n': need n >= 2*classes, got "
                                  f"{self.n} for {self.classes} classes")
        else:
            raise ConfigError(f"field 'data.kind': unknown kind "
                              f"'{self.data_kind}'")
        if self.arch == "cifar6":
            if self.width < 1:
                raise ConfigError(f"field 'model.width': must be >= 1, got "
                                  f"{self.width}")
            if not 1 <= self.k <= 6:
                raise ConfigError(f"field 'model.k': must be in [1, 6], got "
                                  f"{self.k}")
        elif self.arch == "custom":
            if not self.stages_text:
                raise ConfigError("field 'model.stages': custom arch needs "
                                  "stage specs")
        else:
            raise ConfigError(f"field 'model.arch': unknown arch '{self.arch}'")
        if self.k > 1 and self.aux not in AUX_CHOICES:
            raise ConfigError(f"field 'model.aux': must be one of "
                              f"{AUX_CHOICES}, got '{self.aux}'")
        if self.epochs < 1:
            raise ConfigError(f"field 'train.epochs': must be >= 1, got "
                              f"{self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"field 'train.batch_size': must be >= 1")
        if self.trainer == "async":
            if self.m < 1:
                raise ConfigError(f"field 'async.m': must be >= 1, got {self.m}")
            if self.s < 1.0:
                raise ConfigError(f"field 'async.s': slowdown must be >= 1, "
                                  f"got {self.s}")
            if self.slow_worker is not None and not 1 <= self.slow_worker <= self.k:
                raise ConfigError(f"field 'async.slow_worker': must be in "
                                  f"[1, {self.k}], got {self.slow_worker}")
        if self.seed < 0:
            raise ConfigError(f"field 'run.seed': must be >= 0, got {self.seed}")


def config_from_kv(kv: dict[str, str]) -> ExperimentConfig:
    # trainer-specific fields are accepted only for their trainer
    trainer = kv.get("train.trainer", "sync")
    async_keys = [k for k in kv if k.startswith("async.")]
    if trainer != "async" and async_keys:
        raise ConfigError(f"field '{async_keys[0]}': only valid when "
                          f"train.trainer = async")
    try:
        opt = OptimizerConfig(
            lr=_get(kv, "train.lr", float, 0.1),
            momentum=_get(kv, "train.momentum", float, 0.9),
            weight_decay=_get(kv, "train.weight_decay", float, 5e-4),
            schedule=_get(kv, "train.schedule", str, "step_decay"),
            decay_factor=_get(kv, "train.decay_factor", float, 0.2),
            decay_period=_get(kv, "train.decay_period", int, 15),
            rm_alpha=_get(kv, "train.rm_alpha", float, 0.7),
        )
    except ValueError as e:
        raise ConfigError(f"field 'train': {e}") from None
    # custom stage specs are '&&'-separated single-line stage texts
    stages = tuple(s.strip() for s in kv.get("model.stages", "").split("&&")
                   if s.strip()) if "model.stages" in kv else ()
    return ExperimentConfig(
        data_kind=_get(kv, "data.kind", str, "gridimg"),
        n=_get(kv, "data.n", int, 2000),
        classes=_get(kv, "data.classes", int, 2),
        noise=_get(kv, "data.noise", float, 0.5),
        separation=_get(kv, "data.separation", float, 6.0),
        data_seed=_get(kv, "data.seed", int),
        images=_get(kv, "data.images", str),
        labels=_get(kv, "data.labels", str),
        arch=_get(kv, "model.arch", str, "cifar6"),
        width=_get(kv, "model.width", int, 8),
        aux=_get(kv, "model.aux", str, "mlp_aux"),
        k=_get(kv, "model.k", int, 6),
        stages_text=stages,
        trainer=trainer,
        epochs=_get(kv, "train.epochs", int, 10),
        batch_size=_get(kv, "train.batch_size", int, 32),
        opt=opt,
        m=_get(kv, "async.m", int, 50),
        s=_get(kv, "async.s", float, 1.0),
        slow_worker=_get(kv, "async.slow_worker", int),
        update_cap=_get(kv, "async.update_cap", int),
        seed=_get(kv, "run.seed", int, 0),
        out=_get(kv, "run.out", str),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_kv(parse_kv(text))


def load_kv(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as f:
            return parse_kv(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
