"""Resolved run configuration: defaults < config file < CROZE_SEED (seed only) < flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

from .perturb import PerturbConfig
from .proxies import PROXY_KINDS, ProxyConfig, parse_components
from .space import SPACE_KINDS, StackConfig


class ConfigError(ValueError):
    pass


def _pair(text, kind=int):
    if text in (None, "", "none"):
        return None
    try:
        a, b = (kind(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"expected two comma-separated numbers, got {text!r}") from None
    return (a, b)


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_str(text):
    return None if text in (None, "", "none") else str(text)


@dataclass(frozen=True)
class RunConfig:
    space: str = "nb201"
    stack: str = "8,3,1,16,16,10"
    in_channels: int = 3
    beta: float = 0.01
    gamma: float = 0.1
    epsilon: float = 8 / 255
    sigma: float = 8 / 255
    perturb: str = "fgsm"
    components: str = "ZPG"
    clip: tuple | None = None
    exclude_head: bool = False
    seed: int = 0
    jobs: int = 1
    batch: str | None = None
    synthetic: str = "n=8,classes=10"
    proxy: str = "croze"
    algo: str = "ae"
    budget: int = 300
    warmup: tuple | None = None
    move: tuple | None = None
    population: int = 20
    ae_sample: int = 5
    benchmark: str | None = None
    metric: str = "clean"
    shortlist: int = 10

    def __post_init__(self):
        if self.space not in SPACE_KINDS:
            raise ConfigError(f"--space must be one of {SPACE_KINDS}")
        if self.proxy not in PROXY_KINDS:
            raise ConfigError(f"--proxy must be one of {PROXY_KINDS}")
        if self.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        try:
            self.stack_config()
            self.proxy_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def stack_config(self) -> StackConfig:
        return StackConfig.parse(self.stack, self.in_channels)

    def proxy_config(self) -> ProxyConfig:
        perturb = PerturbConfig(self.beta, self.epsilon, self.sigma, self.perturb, self.clip)
        return ProxyConfig(self.gamma, perturb, parse_components(self.components), self.seed,
                           not self.exclude_head)

    def synthetic_params(self):
        """``n``, ``classes`` and ``seed`` of the synthetic batch."""
        out = {"n": 8, "classes": self.stack_config().num_classes, "seed": self.seed}
        for tok in self.synthetic.replace(",", " ").split():
            key, _, value = tok.partition("=")
            if key not in out or not value:
                raise ConfigError(f"bad --synthetic token {tok!r}; use n=, classes=, seed=")
            try:
                out[key] = int(value)
            except ValueError:
                raise ConfigError(f"bad --synthetic value {tok!r}") from None
        return out

    def to_dict(self):
        return {f.name: _render(getattr(self, f.name)) for f in fields(self)}

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def _render(v):
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


_CONVERT = {
    "in_channels": int, "beta": float, "gamma": float, "epsilon": float, "sigma": float,
    "clip": lambda t: _pair(t, float), "exclude_head": _bool, "seed": int, "jobs": int,
    "batch": _opt_str, "budget": int, "warmup": _pair, "move": _pair, "population": int,
    "ae_sample": int, "benchmark": _opt_str, "shortlist": int,
}
FIELD_NAMES = {f.name for f in fields(RunConfig)}


def parse_config_text(text, source="config"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in FIELD_NAMES:
            raise ConfigError(f"{source}:{lineno}: unknown or malformed entry {line!r}")
        values[key] = value.strip()
    return values


def _convert(key, value):
    if not isinstance(value, str):
        return value
    try:
        return _CONVERT.get(key, str)(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def resolve(file_values=None, flags=None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    merged = {}
    for k, v in (file_values or {}).items():
        merged[k] = _convert(k, v)
    if "seed" not in (flags or {}) and "seed" not in merged and env.get("CROZE_SEED"):
        merged["seed"] = _convert("seed", env["CROZE_SEED"])
    for k, v in (flags or {}).items():
        merged[k] = _convert(k, v)
    return replace(RunConfig(), **merged)
