"""Experiment configuration and its flat ``key = value`` file format.

One key per line, ``#`` starts a comment, section names are dotted
prefixes::

    seed = 3
    data.n = 200
    train.lr = 0.005
    experiment.configurations = baseline, label_manip

Unknown keys are errors. :data:`KEYS` lists every accepted key with its
default; ``fedseg run --print-defaults`` prints them in file form.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..corruption import CorruptionConfig
from ..data.generate import GenConfig
from ..errors import ConfigError
from ..federation import CONFIGURATIONS, PARADIGMS, RoundPlan, TrainerConfig
from ..model import UNetConfig


@dataclass(frozen=True)
class DetectConfig:
    delta_abs: float = 0.02
    delta_rel: float = 0.25
    k_consecutive: int = 3
    warmup_epochs: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on. The defaults are the desk-scale setup."""

    seed: int = 0
    n: int = 200
    height: int = 32
    width: int = 64
    n_clients: int = 5
    test_fraction: float = 0.10
    model: UNetConfig = field(default_factory=UNetConfig)
    total_epochs: int = 20
    rounds: int = 4
    batch_size: int = 4
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(lr=5e-3))
    configurations: tuple[str, ...] = CONFIGURATIONS
    paradigms: tuple[str, ...] = PARADIGMS
    faulty_client: int = 0
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    threshold: float = 0.5
    boundary: bool = False
    out: str = "runs/desk"

    def __post_init__(self):
        d = self.model.divisor
        if self.height % d or self.width % d:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by {d} (levels={self.model.levels})")
        bad = [c for c in self.configurations if c not in CONFIGURATIONS]
        if bad or not self.configurations:
            raise ConfigError(f"configurations must be a non-empty subset of {CONFIGURATIONS}, got {self.configurations}")
        bad = [p for p in self.paradigms if p not in PARADIGMS]
        if bad or not self.paradigms:
            raise ConfigError(f"paradigms must be a non-empty subset of {PARADIGMS}, got {self.paradigms}")
        if self.n < 1 or self.n_clients < 1:
            raise ConfigError("n and n_clients must be positive")
        if not 0 <= self.faulty_client < self.n_clients:
            raise ConfigError(f"faulty_client {self.faulty_client} outside 0..{self.n_clients - 1}")
        self.round_plan()  # validates epochs / rounds / batch size
        if self.corruption.seed != self.seed:
            object.__setattr__(self, "corruption", dataclasses.replace(self.corruption, seed=self.seed))

    def round_plan(self, participants=None) -> RoundPlan:
        participants = tuple(range(self.n_clients)) if participants is None else tuple(participants)
        return RoundPlan(self.total_epochs, self.rounds, participants, self.batch_size)

    def gen_config(self) -> GenConfig:
        return GenConfig()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


# -- file format -----------------------------------------------------------------

def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _names(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _names(s))


# key -> (object path, parser). Paths: top-level field or "<field>.<subfield>".
KEYS: dict[str, tuple[str, type]] = {
    "seed": ("seed", int),
    "out": ("out", str),
    "data.n": ("n", int),
    "data.height": ("height", int),
    "data.width": ("width", int),
    "data.clients": ("n_clients", int),
    "data.test_fraction": ("test_fraction", float),
    "model.levels": ("model.levels", int),
    "model.base_channels": ("model.base_channels", int),
    "model.reduction": ("model.reduction", int),
    "model.bn_momentum": ("model.bn_momentum", float),
    "model.bn_eps": ("model.bn_eps", float),
    "train.epochs": ("total_epochs", int),
    "train.rounds": ("rounds", int),
    "train.batch_size": ("batch_size", int),
    "train.optimizer": ("trainer.optimizer", str),
    "train.lr": ("trainer.lr", float),
    "train.weight_decay": ("trainer.weight_decay", float),
    "train.smooth": ("trainer.smooth", float),
    "train.loss_reduction": ("trainer.loss_reduction", str),
    "train.reset_optimizer": ("trainer.reset_optimizer", _bool),
    "experiment.configurations": ("configurations", _names),
    "experiment.paradigms": ("paradigms", _names),
    "experiment.faulty_client": ("faulty_client", int),
    "corruption.dilation_kernels": ("corruption.dilation_kernels", _ints),
    "corruption.omission_prob": ("corruption.omission_prob", float),
    "corruption.noise_mu": ("corruption.noise_mu", float),
    "corruption.noise_sigma": ("corruption.noise_sigma", float),
    "detect.delta_abs": ("detect.delta_abs", float),
    "detect.delta_rel": ("detect.delta_rel", float),
    "detect.k_consecutive": ("detect.k_consecutive", int),
    "detect.warmup_epochs": ("detect.warmup_epochs", int),
    "eval.threshold": ("threshold", float),
    "eval.boundary": ("boundary", _bool),
}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse the flat key-value format into an :class:`ExperimentConfig`.

    Corruption draws are always seeded by ``seed``.
    """
    top: dict = {}
    nested: dict[str, dict] = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        path, parse = KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
        if "." in path:
            outer, inner = path.split(".", 1)
            nested.setdefault(outer, {})[inner] = parsed
        else:
            top[path] = parsed
    base = ExperimentConfig()
    for outer, fields in nested.items():
        top[outer] = dataclasses.replace(getattr(base, outer), **fields)
    try:
        return ExperimentConfig(**top)
    except TypeError as e:  # pragma: no cover - guarded by KEYS
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    return parse_config(text, str(path))


def _lookup(cfg: ExperimentConfig, path: str):
    obj = cfg
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key with its value; ``parse_config(dump_config(c)) == c``."""
    return "".join(f"{k} = {_format(_lookup(cfg, path))}\n" for k, (path, _) in KEYS.items())
