"""Run configuration: key-value config files merged with CLI flags.

Config grammar (one setting per line)::

    # comment
    key = value          # scalar: int, float, true/false, or bare string
    key = v1, v2, v3     # comma-separated list of scalars

Flag values win over config-file values; hard defaults apply last.  Every
numeric setting is validated against the owning module's preconditions
before any work starts, so a bad run dies with a config error instead of
half-way through a fit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

_SCHEMA_KEYS = ("subject_id", "time_months", "cd4", "wbc", "lymph_pct")


def _parse_scalar(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_file(path) -> dict:
    """Parse the key = value grammar documented in the module docstring."""
    out: dict = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out


def pick(flag_value, config: dict, key: str, default):
    """Flag beats config file beats default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _as_list(value, kind=float):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [kind(v) for v in value]
    if isinstance(value, str):
        return [kind(v) for v in value.split(",") if v.strip()]
    return [kind(value)]


@dataclass
class RunConfig:
    """Shared settings; command-specific subclasses add their own."""

    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    knot_months: float = 1.0
    schema: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.knot_months > 0:
            raise ConfigError(f"knot_months must be positive, got {self.knot_months}")
        unknown = set(self.schema) - set(_SCHEMA_KEYS)
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = dict(v) if isinstance(v, dict) else \
                (list(v) if isinstance(v, (list, tuple)) else v)
        return out


@dataclass
class SimulateConfig(RunConfig):
    n_subjects: int = 270
    out: str = "cohort.csv"
    truth_out: str = "truth.json"
    role_label: str = "learning"

    def validate(self) -> None:
        super().validate()
        if self.n_subjects < 1:
            raise ConfigError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if self.role_label not in ("learning", "test"):
            raise ConfigError(f"role_label must be learning or test, got {self.role_label!r}")


@dataclass
class FitConfig(RunConfig):
    data: str = ""
    model: str = "lmm"
    threshold_k: float | None = None
    integration_method: str = "laplace"
    integration_nodes: int = 1
    out: str = "fit.json"

    def validate(self) -> None:
        super().validate()
        if not self.data:
            raise ConfigError("fit requires --data")
        if self.model not in ("lmm", "glmm"):
            raise ConfigError(f"model must be lmm or glmm, got {self.model!r}")
        if self.model == "glmm":
            if self.threshold_k is None or self.threshold_k <= 0:
                raise ConfigError("glmm fits require a positive --k threshold")
            if self.integration_method not in ("laplace", "adaptive_gh"):
                raise ConfigError(f"unknown integration method {self.integration_method!r}")
            if self.integration_nodes < 1:
                raise ConfigError("integration nodes must be >= 1")


@dataclass
class ValidateConfig(RunConfig):
    learning: str = ""
    test: str = ""
    model: str = "lmm"
    thresholds: list = field(default_factory=lambda: [200.0, 350.0])
    budgets: list = field(default_factory=lambda: [0.05, 0.10])
    out_dir: str = "."
    resub_random_effects: str = "auto"
    lmm_variance_mode: str = "new_individual_simple"

    def validate(self) -> None:
        super().validate()
        if not self.learning or not self.test:
            raise ConfigError("validate requires --learning and --test paths")
        if self.model not in ("lmm", "glmm"):
            raise ConfigError(f"model must be lmm or glmm, got {self.model!r}")
        if not self.thresholds or any(k <= 0 for k in self.thresholds):
            raise ConfigError("thresholds must be positive")
        if not self.budgets or any(not 0 < b <= 1 for b in self.budgets):
            raise ConfigError("budgets must lie in (0, 1]")
        if self.resub_random_effects not in ("auto", "zero", "posterior"):
            raise ConfigError(
                f"resub_random_effects must be auto/zero/posterior, "
                f"got {self.resub_random_effects!r}")
        if self.lmm_variance_mode not in ("new_individual_simple", "new_individual_with_re"):
            raise ConfigError(f"unsupported variance mode {self.lmm_variance_mode!r}")


@dataclass
class RocConfig(RunConfig):
    data: str = ""
    model: str = "lmm"
    threshold_k: float = 200.0
    out_csv: str = "roc.csv"
    out_svg: str = "roc.svg"

    def validate(self) -> None:
        super().validate()
        if not self.data:
            raise ConfigError("roc requires --data")
        if self.model not in ("lmm", "glmm"):
            raise ConfigError(f"model must be lmm or glmm, got {self.model!r}")
        if self.threshold_k <= 0:
            raise ConfigError("threshold must be positive")


@dataclass
class BootstrapConfig(RunConfig):
    data: str = ""
    model: str = "lmm"
    threshold_k: float = 200.0
    fp_budget: float = 0.10
    replicates: int = 100
    out: str = "bootstrap.json"

    def validate(self) -> None:
        super().validate()
        if not self.data:
            raise ConfigError("bootstrap requires --data")
        if self.model not in ("lmm", "glmm"):
            raise ConfigError(f"model must be lmm or glmm, got {self.model!r}")
        if self.threshold_k <= 0:
            raise ConfigError("threshold must be positive")
        if not 0 < self.fp_budget <= 1:
            raise ConfigError(f"fp_budget must be in (0, 1], got {self.fp_budget}")
        if self.replicates < 2:
            raise ConfigError(f"replicates must be >= 2, got {self.replicates}")
