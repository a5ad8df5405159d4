"""Which tensors to edit, and with which parameters.

Patterns are anchored shell globs over full tensor names; ``*`` crosses dots.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase
from pathlib import Path

from .core import PomeParams

log = logging.getLogger(__name__)

LAYER_PRESETS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
DEFAULT_INCLUDE = ("*.mlp.up_proj.weight",)
DEFAULT_BETA_GRID = (1.0, 1.3, 1.5, 1.8, 2.0, 2.3, 2.5, 3.0)
DTYPE_POLICIES = ("preserve", "f32")

_TOP_KEYS = {"include", "exclude", "k_ratio", "explicit_k", "beta", "beta_sweep", "overrides", "dtype_policy"}
_OVERRIDE_KEYS = {"pattern", "k_ratio", "explicit_k", "beta"}


class ConfigError(ValueError):
    pass


class SelectionError(ValueError):
    pass


def preset_pattern(name):
    if name not in LAYER_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(LAYER_PRESETS)}")
    return f"*.{name}.weight"


@dataclass(frozen=True)
class Override:
    pattern: str
    params: PomeParams


@dataclass(frozen=True)
class EditConfig:
    include_patterns: tuple = DEFAULT_INCLUDE
    exclude_patterns: tuple = ()
    params: PomeParams = field(default_factory=PomeParams)
    overrides: tuple = ()
    dtype_policy: str = "preserve"
    beta_sweep: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "include_patterns", tuple(self.include_patterns))
        object.__setattr__(self, "exclude_patterns", tuple(self.exclude_patterns))
        object.__setattr__(self, "overrides", tuple(self.overrides))
        if not self.include_patterns:
            raise ConfigError("at least one include pattern is required")
        if self.dtype_policy not in DTYPE_POLICIES:
            raise ConfigError(f"dtype_policy must be one of {DTYPE_POLICIES}, got {self.dtype_policy!r}")
        if self.beta_sweep is not None:
            sweep = tuple(float(b) for b in self.beta_sweep)
            if not sweep:
                raise ConfigError("beta_sweep must not be empty")
            if any(not (b > 0 and math.isfinite(b)) for b in sweep):
                raise ConfigError(f"beta_sweep values must be positive and finite, got {list(sweep)}")
            if len(set(sweep)) != len(sweep):
                raise ConfigError(f"beta_sweep values must be distinct, got {list(sweep)}")
            object.__setattr__(self, "beta_sweep", sweep)

    def betas(self):
        """Betas to produce, one output per entry; a single run uses the configured beta."""
        return self.beta_sweep if self.beta_sweep is not None else (self.params.beta,)

    def params_for(self, name):
        params = self.params
        for ov in self.overrides:
            if fnmatchcase(name, ov.pattern):
                params = ov.params
        return params

    def with_beta(self, beta):
        """The same selection with every beta (global and per-override) multiplied onto ``beta``.

        Overrides that set their own beta keep their ratio to the global one.
        """
        scale = beta / self.params.beta
        return replace(
            self,
            params=replace(self.params, beta=beta),
            overrides=tuple(Override(o.pattern, replace(o.params, beta=o.params.beta * scale))
                            for o in self.overrides),
            beta_sweep=None,
        )


def select(shapes, config):
    """Sorted ``[(name, params)]`` for the tensors ``config`` selects.

    ``shapes`` maps tensor names to shapes (a manifest's ``.shapes()``).
    Exclusion beats inclusion; the last matching override supplies the params.
    """
    names = sorted(shapes)
    for pattern in (*config.include_patterns, *config.exclude_patterns, *(o.pattern for o in config.overrides)):
        if not any(fnmatchcase(n, pattern) for n in names):
            log.warning("pattern %r matches no tensor", pattern)

    chosen = []
    bad = []
    for name in names:
        if not any(fnmatchcase(name, p) for p in config.include_patterns):
            continue
        if any(fnmatchcase(name, p) for p in config.exclude_patterns):
            continue
        if len(shapes[name]) != 2:
            bad.append(f"{name} {list(shapes[name])}")
            continue
        chosen.append((name, config.params_for(name)))
    if bad:
        raise SelectionError("selection matched tensors that are not 2-D: " + "; ".join(bad))
    return chosen


def _params_from(doc, base, where):
    has_ratio = "k_ratio" in doc
    has_k = doc.get("explicit_k") is not None
    if has_ratio and has_k:
        raise ConfigError(f"{where}: set either k_ratio or explicit_k, not both")
    kw = {}
    if has_ratio:
        kw["k_ratio"] = _number(doc["k_ratio"], f"{where}.k_ratio")
        kw["explicit_k"] = None
    if has_k:
        k = doc["explicit_k"]
        if not isinstance(k, int) or isinstance(k, bool):
            raise ConfigError(f"{where}.explicit_k must be an integer, got {k!r}")
        kw["explicit_k"] = k
    if "beta" in doc:
        kw["beta"] = _number(doc["beta"], f"{where}.beta")
    try:
        return replace(base, **kw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _number(x, where):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{where} must be a number, got {x!r}")
    return float(x)


def _string_list(x, where):
    if not isinstance(x, list) or not all(isinstance(p, str) for p in x):
        raise ConfigError(f"{where} must be a list of strings")
    return tuple(x)


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    params = _params_from(doc, PomeParams(), "config")
    overrides = []
    raw = doc.get("overrides", [])
    if not isinstance(raw, list):
        raise ConfigError("overrides must be a list")
    for i, ov in enumerate(raw):
        where = f"overrides[{i}]"
        if not isinstance(ov, dict) or not isinstance(ov.get("pattern"), str):
            raise ConfigError(f"{where} must be an object with a string 'pattern'")
        unknown = sorted(set(ov) - _OVERRIDE_KEYS)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        # an override's explicit_k replaces an inherited ratio and vice versa
        overrides.append(Override(ov["pattern"], _params_from(ov, params, where)))
    sweep = doc.get("beta_sweep")
    if sweep is not None:
        if not isinstance(sweep, list):
            raise ConfigError("beta_sweep must be a list of numbers")
        sweep = tuple(_number(b, "beta_sweep") for b in sweep)
    return EditConfig(
        include_patterns=_string_list(doc.get("include", list(DEFAULT_INCLUDE)), "include"),
        exclude_patterns=_string_list(doc.get("exclude", []), "exclude"),
        params=params,
        overrides=tuple(overrides),
        dtype_policy=doc.get("dtype_policy", "preserve"),
        beta_sweep=sweep,
    )


def load_config(path=None, flags=None):
    """Config from a JSON file (optional) with ``flags`` layered on top.

    ``flags`` uses the file's key names plus ``presets`` (layer-type names);
    keys set to None are ignored. Presets and ``include`` from flags replace
    the file's include list rather than extending it.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    include = list(flags.pop("include", []))
    include += [preset_pattern(p) for p in flags.pop("presets", [])]
    if include:
        doc["include"] = include
    # a ratio or k given on the command line displaces the other from the file
    if "k_ratio" in flags and "explicit_k" in flags:
        raise ConfigError("--k-ratio and --k are mutually exclusive")
    if "k_ratio" in flags:
        doc.pop("explicit_k", None)
    if "explicit_k" in flags:
        doc.pop("k_ratio", None)
    doc.update(flags)
    return config_from_dict(doc)


def parse_beta_list(text):
    if text.strip() == "default":
        return DEFAULT_BETA_GRID
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"cannot parse beta list {text!r}") from None
