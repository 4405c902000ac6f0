"""Run configuration: sectioned ``key = value`` text with validation.

Sections and keys mirror the hyperparameter tables (``learning_rate``,
``batch_size``, ``tau``, ``actor_update_frequency``, ...). Every value can
be overridden from the environment with ``SGFD_<SECTION>_<KEY>``, e.g.
``SGFD_AGENT_LEARNING_RATE=3e-4``. Precedence: defaults < file < env
vars < explicit CLI flags.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from sgfd._errors import InvalidArgument
from sgfd.agent import METHODS
from sgfd.decorrelation import COV_FORMS

GRAD_SCALES = ("none", "n", "n2")


class ConfigError(InvalidArgument):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _spec(check, doc):
    return {"check": check, "doc": doc}


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit_open(x):
    return 0 <= x < 1


@dataclass
class RunSection:
    seed: int = field(default=0, metadata=_spec(_nonneg, ">= 0"))
    method: str = field(default="sgfd", metadata=_spec(lambda m: m in METHODS, f"one of {METHODS}"))
    total_steps: int = field(default=20000, metadata=_spec(_positive, "> 0"))
    random_steps: int = field(default=1000, metadata=_spec(_nonneg, ">= 0"))
    eval_every: int = field(default=5000, metadata=_spec(_positive, "> 0"))
    eval_episodes: int = field(default=500, metadata=_spec(_positive, "> 0"))
    checkpoint_every: int = field(default=5000, metadata=_spec(_positive, "> 0"))
    report_samples: int = field(default=512, metadata=_spec(lambda n: n >= 2, ">= 2"))
    output_dir: str = field(default="runs/sgfd", metadata=_spec(bool, "non-empty"))


@dataclass
class EnvSection:
    kind: str = field(default="spurious_bandit",
                      metadata=_spec(lambda k: k in ("spurious_bandit", "pointmass"),
                                     "spurious_bandit or pointmass"))
    K: int = field(default=4, metadata=_spec(lambda k: k >= 2, ">= 2"))
    d: int = field(default=5, metadata=_spec(lambda d: d >= 3, ">= 3"))
    lo: float = field(default=1.0, metadata=_spec(_positive, "> 0"))
    hi: float = field(default=5.0, metadata=_spec(_positive, "> 0"))
    rho: float = field(default=0.8, metadata=_spec(lambda r: -1 < r < 1, "|rho| < 1"))
    changed_noise: float = field(default=0.3, metadata=_spec(_positive, "> 0"))
    noise_std: float = field(default=0.0, metadata=_spec(_nonneg, ">= 0"))
    horizon: int = field(default=1, metadata=_spec(_positive, "> 0"))


@dataclass
class AgentSection:
    learning_rate: float = field(default=1e-3, metadata=_spec(_positive, "> 0"))
    batch_size: int = field(default=128, metadata=_spec(lambda b: b >= 2, ">= 2"))
    tau: float = field(default=0.01, metadata=_spec(lambda t: 0 < t <= 1, "in (0, 1]"))
    actor_update_frequency: int = field(default=2, metadata=_spec(_positive, "> 0"))
    replay_capacity: int = field(default=100000, metadata=_spec(_positive, "> 0"))
    hidden: int = field(default=64, metadata=_spec(_positive, "> 0"))
    hidden_layers: int = field(default=1, metadata=_spec(_positive, "> 0"))
    alpha: float = field(default=0.1, metadata=_spec(_nonneg, ">= 0"))
    gamma: float = field(default=0.99, metadata=_spec(lambda g: 0 <= g < 1, "in [0, 1)"))
    weighted_critic: bool = field(default=False, metadata=_spec(lambda b: True, "bool"))


@dataclass
class DecorrSection:
    M: int = field(default=5, metadata=_spec(_positive, "> 0"))
    inner_iters: int = field(default=10, metadata=_spec(_nonneg, ">= 0"))
    learning_rate: float = field(default=1e-2, metadata=_spec(_positive, "> 0"))
    momentum: float = field(default=0.9, metadata=_spec(_unit_open, "in [0, 1)"))
    weight_decay: float = field(default=1e-4, metadata=_spec(_nonneg, ">= 0"))
    grad_scale: str = field(default="n2", metadata=_spec(lambda s: s in GRAD_SCALES,
                                                         f"one of {GRAD_SCALES}"))
    cov_form: str = field(default="moments", metadata=_spec(lambda s: s in COV_FORMS,
                                                            f"one of {COV_FORMS}"))
    standardize: bool = field(default=True, metadata=_spec(lambda b: True, "bool"))
    nonnegative: bool = field(default=True, metadata=_spec(lambda b: True, "bool"))


@dataclass
class ClassifierSection:
    hidden: int = field(default=128, metadata=_spec(_positive, "> 0"))
    learning_rate: float = field(default=3e-3, metadata=_spec(_positive, "> 0"))
    warmup_steps: int = field(default=1000, metadata=_spec(_nonneg, ">= 0"))
    accuracy_threshold: float = field(default=0.9, metadata=_spec(lambda a: 0 <= a <= 1,
                                                                  "in [0, 1]"))
    max_inner_iters: int = field(default=10, metadata=_spec(_positive, "> 0"))
    signed_saliency: bool = field(default=False, metadata=_spec(lambda b: True, "bool"))


SECTIONS = {
    "run": RunSection,
    "env": EnvSection,
    "agent": AgentSection,
    "decorr": DecorrSection,
    "classifier": ClassifierSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    agent: AgentSection = field(default_factory=AgentSection)
    decorr: DecorrSection = field(default_factory=DecorrSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)

    def validate(self):
        for name in SECTIONS:
            section = getattr(self, name)
            for f in fields(section):
                value = getattr(section, f.name)
                if not isinstance(value, f.type if isinstance(f.type, type) else _TYPES[f.type]):
                    raise ConfigError(f"{name}.{f.name}", f"expected {f.type}, got {value!r}")
                if not f.metadata["check"](value):
                    raise ConfigError(f"{name}.{f.name}", f"{value!r} must be {f.metadata['doc']}")
        if self.env.lo >= self.env.hi:
            raise ConfigError("env.hi", "must exceed env.lo")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    def replace(self, section, **changes):
        """Copy with ``changes`` applied to one section (values are parsed if strings)."""
        sec = getattr(self, section)
        parsed = {k: _coerce(f"{section}.{k}", _field_type(sec, k), v) for k, v in changes.items()}
        return dataclasses.replace(self, **{section: dataclasses.replace(sec, **parsed)})


_TYPES = {"int": int, "float": (int, float), "str": str, "bool": bool}


def _field_type(section, key):
    for f in fields(section):
        if f.name == key:
            return f.type
    raise ConfigError(f"{type(section).__name__}.{key}", "unknown key")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, type_name, raw):
    if not isinstance(raw, str):
        return float(raw) if type_name == "float" and isinstance(raw, int) else raw
    raw = raw.strip()
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {type_name}") from None


def _apply(cfg, section, key, raw):
    if section not in SECTIONS:
        raise ConfigError(f"{section}.{key}", f"unknown section {section!r}")
    sec = getattr(cfg, section)
    known = {f.name: f.type for f in fields(sec)}
    if key not in known:
        raise ConfigError(f"{section}.{key}", "unknown key")
    setattr(sec, key, _coerce(f"{section}.{key}", known[key], raw))


def parse_config(text):
    """Parse config text on top of the defaults (no validation)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (``M``, ``K``)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw)
    return cfg


def env_overrides(cfg, environ=None):
    """Apply ``SGFD_<SECTION>_<KEY>`` variables (case-insensitive key match)."""
    environ = os.environ if environ is None else environ
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            var = f"SGFD_{section.upper()}_{f.name.upper()}"
            if var in environ:
                _apply(cfg, section, f.name, environ[var])
    return cfg


def load_config(path=None, environ=None):
    """Defaults, then ``path`` (if any), then environment overrides; validated."""
    text = Path(path).read_text() if path is not None else ""
    cfg = parse_config(text)
    env_overrides(cfg, environ)
    return cfg.validate()
