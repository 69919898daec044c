"""Run configuration with validation and flat key-value file support."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .clusters import Aggregation
from .inference import Procedure
from .permute import Scheme


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    procedures: list = field(default_factory=lambda: ["clusterdepth"])
    n_perm: int = 5000
    seed: int = 0
    alpha: float = 0.05
    scheme: str = "terbraak"
    tau: Optional[float] = None
    tau_quantile: float = 0.95
    aggregation: str = "sum"
    E: float = 0.5
    H: float = 1.0
    dh: Optional[float] = None
    tfce_start: float = 0.0
    threads: int = 1
    exhaustive: bool = False

    def validate(self) -> "RunConfig":
        if not self.procedures:
            raise ConfigError("no procedure selected")
        try:
            self.procedures = [Procedure.parse(p).value for p in self.procedures]
            self.scheme = Scheme.parse(self.scheme).value
            self.aggregation = Aggregation.parse(self.aggregation).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.n_perm < 2:
            raise ConfigError("permutations must be at least 2")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 < self.tau_quantile < 1:
            raise ConfigError("tau quantile must lie in (0, 1)")
        if self.dh is not None and not self.dh > 0:
            raise ConfigError("dh must be positive")
        if self.E < 0 or self.H < 0:
            raise ConfigError("E and H must be non-negative")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_ALIASES = {"permutations": "n_perm", "procedure": "procedures", "quantile": "tau_quantile",
            "e": "E", "h": "H", "tfce_e": "E", "tfce_h": "H", "tfce_dh": "dh"}


def read_keyvalue(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(name: str, raw):
    if raw is None:
        return None
    if name == "procedures":
        if isinstance(raw, str):
            return [p.strip() for p in raw.split(",") if p.strip()]
        return list(raw)
    if name in ("tau", "dh") and str(raw).lower() in ("", "none", "auto"):
        return None
    if name == "exhaustive":
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes", "on")
    if name in ("n_perm", "seed", "threads"):
        return int(raw)
    if name in ("alpha", "tau", "tau_quantile", "E", "H", "dh", "tfce_start"):
        return float(raw)
    return str(raw)


def build_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then config-file values, then command-line overrides."""
    names = {f.name for f in fields(RunConfig)}
    values = {}
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            name = _ALIASES.get(key.lower() if key not in names else key, key)
            if name not in names:
                raise ConfigError(f"unknown configuration key {key!r}")
            try:
                values[name] = _coerce(name, raw)
            except ValueError:
                raise ConfigError(f"invalid value {raw!r} for {key}") from None
    return RunConfig(**values).validate()
