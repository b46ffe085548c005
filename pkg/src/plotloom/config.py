"""Run configuration: defaults < environment < config file < command-line flags."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:   # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .llmio import DEFAULT_API_KEY_ENV, BackendConfig, BackendKind, GenerationOptions
from .corpus import WindowConfig
from .refine import RefineConfig

ENV_PREFIX = "PLOTLOOM_"

# keys that change how a run executes but not what it produces
_OPERATIONAL = {"parallel", "timeout_s", "max_retries", "api_key_env"}


@dataclass(frozen=True)
class Config:
    backend: str = "mock"
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    api_key_env: str = DEFAULT_API_KEY_ENV
    script: str = ""
    timeout_s: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    max_tokens: int = 2048
    window_lookahead: int = 1
    budget_tokens: int = 8192
    chars_per_token: float = 4.0
    traversal: str = "bft"
    max_rounds: int = 4
    max_relation_passes: int = 5
    scenes: int | None = None
    seed: int = 0
    parallel: int = 1
    novel: str = ""
    title: str = ""
    templates: str = ""

    def validate(self) -> "Config":
        if self.backend not in ("openai", "mock"):
            raise ConfigError("backend", f"must be 'openai' or 'mock', got {self.backend!r}")
        if self.traversal not in ("dft", "bft", "chapter"):
            raise ConfigError("traversal", f"must be dft, bft or chapter, got {self.traversal!r}")
        checks = [
            ("max_rounds", self.max_rounds >= 1, "must be at least 1"),
            ("max_relation_passes", self.max_relation_passes >= 1, "must be at least 1"),
            ("budget_tokens", self.budget_tokens >= 256, "must be at least 256"),
            ("window_lookahead", self.window_lookahead >= 0, "must be non-negative"),
            ("chars_per_token", self.chars_per_token > 0, "must be positive"),
            ("temperature", 0 <= self.temperature <= 2, "must lie in [0, 2]"),
            ("max_tokens", self.max_tokens > 0, "must be positive"),
            ("scenes", self.scenes is None or self.scenes >= 1, "must be at least 1"),
            ("parallel", self.parallel >= 1, "must be at least 1"),
            ("timeout_s", self.timeout_s > 0, "must be positive"),
            ("max_retries", self.max_retries >= 0, "must be non-negative"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        if self.script and not Path(self.script).is_file():
            raise ConfigError("script", f"file not found: {self.script}")
        return self

    # -- derived views -------------------------------------------------------

    def window(self) -> WindowConfig:
        return WindowConfig(self.window_lookahead, self.budget_tokens, self.chars_per_token)

    def refine(self) -> RefineConfig:
        return RefineConfig(max_rounds=self.max_rounds)

    def generation(self) -> GenerationOptions:
        return GenerationOptions(self.temperature, self.max_tokens)

    def backend_config(self) -> BackendConfig:
        kind = BackendKind.MOCK if self.backend == "mock" else BackendKind.LIVE
        return BackendConfig(kind, self.base_url, self.model, self.api_key_env, self.script,
                             self.timeout_s, self.max_retries)

    def fingerprint(self) -> str:
        """Stable hash of every setting that can change pipeline output."""
        doc = {k: v for k, v in asdict(self).items() if k not in _OPERATIONAL}
        if self.backend == "mock":
            doc.pop("base_url")
            doc.pop("model")
            if self.script and Path(self.script).is_file():
                doc["script"] = hashlib.sha256(Path(self.script).read_bytes()).hexdigest()
        for key in ("novel",):
            if doc.get(key):
                doc[key] = Path(doc[key]).name
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if value is None:
        if "None" in str(kind):
            return None
        raise ConfigError(key, "may not be empty")
    try:
        if kind in ("int", "int | None"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {value!r}") from None


def _read_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        if p.suffix == ".toml":
            with open(p, "rb") as fh:
                data = tomllib.load(fh)
        else:
            data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {p}") from None
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {p}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a table/object")
    return data


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> Config:
    """Resolve configuration with precedence env < file < flags.

    Environment keys are ``PLOTLOOM_<KEY>`` (``PLOTLOOM_MAX_ROUNDS`` and so
    on). Flag overrides whose value is None are ignored. Unknown file or flag
    keys raise :class:`ConfigError` naming the key.
    """
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    for key in _FIELD_TYPES:
        raw = env.get(ENV_PREFIX + key.upper())
        if raw is not None and raw != "":
            values[key] = _coerce(key, raw)
    if path is not None:
        for key, raw in _read_file(path).items():
            if key not in _FIELD_TYPES:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown configuration key")
        if raw is not None:
            values[key] = _coerce(key, raw)
    if "traversal" in values:
        values["traversal"] = str(values["traversal"]).lower()
    return replace(Config(), **values).validate()
