"""Chat-completion backends, prompt templates and structured-output parsing."""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, Protocol, TypeVar

import httpx
from pydantic import BaseModel, ValidationError

from .errors import (
    AuthMissing,
    BackendUnavailable,
    ConfigError,
    MalformedOutput,
    SchemaViolation,
    ScriptExhausted,
    TemplateError,
)

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "PLOTLOOM_API_KEY"


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    tag: str
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.system_prompt.strip() or not self.user_prompt.strip():
            raise ValueError("prompts must be non-empty")
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    backend: str = ""


@dataclass(frozen=True)
class GenerationOptions:
    temperature: float = 0.0
    max_tokens: int = 2048


class BackendKind(str, enum.Enum):
    LIVE = "live"
    MOCK = "mock"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.MOCK
    base_url: str = ""
    model: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    script_path: str = ""
    timeout_s: float = 60.0
    max_retries: int = 3

    def validate(self) -> None:
        if self.kind is BackendKind.LIVE:
            if not self.base_url:
                raise ConfigError("base_url", "required for a live backend")
            if not self.model:
                raise ConfigError("model", "required for a live backend")
        elif not self.script_path:
            raise ConfigError("script", "required for the mock backend")
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s", "must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries", "must be non-negative")


class Backend(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


# -- live --------------------------------------------------------------------


def _completions_url(base_url: str) -> str:
    base = base_url.rstrip("/")
    if base.endswith("/chat/completions"):
        return base
    if base.endswith("/v1"):
        return base + "/chat/completions"
    return base + "/v1/chat/completions"


class LiveBackend:
    """OpenAI-compatible ``/v1/chat/completions`` client.

    Transport errors, 429 and 5xx responses are retried with exponential
    backoff (``backoff_s * 2**attempt``); other 4xx responses fail at once.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        *,
        client: httpx.Client | None = None,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        cfg.validate()
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise AuthMissing(f"environment variable {cfg.api_key_env} is not set")
        self.cfg = cfg
        self._url = _completions_url(cfg.base_url)
        self._headers = {"Authorization": f"Bearer {key}"}
        self._client = client or httpx.Client(timeout=cfg.timeout_s)
        self._backoff = backoff_s
        self._sleep = sleep

    def complete(self, req: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        last_error = ""
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self._backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self._url, json=payload, headers=self._headers)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                log.warning("%s (attempt %d, tag %s)", last_error, attempt + 1, req.tag)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                log.warning("%s (attempt %d, tag %s)", last_error, attempt + 1, req.tag)
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendUnavailable(f"unexpected response body: {exc}") from exc
            usage = body.get("usage") or {}
            return ChatResponse(
                text=text or "",
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                backend=f"live:{self.cfg.model}",
            )
        raise BackendUnavailable(f"gave up after {self.cfg.max_retries + 1} attempts: {last_error}")

    def close(self) -> None:
        self._client.close()


# -- mock --------------------------------------------------------------------


@dataclass
class MockBackend:
    """Replays scripted responses keyed by ``(tag, per-tag call ordinal)``.

    Script entries are ``{"tag": ..., "ordinal": ..., "response": ...}``; a
    non-string response is serialized as JSON. Every request is recorded in
    ``calls`` for inspection.
    """

    script: dict[tuple[str, int], str]
    calls: list[ChatRequest] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_entries(cls, entries: Iterable[dict]) -> "MockBackend":
        script: dict[tuple[str, int], str] = {}
        for entry in entries:
            resp = entry["response"]
            if not isinstance(resp, str):
                resp = json.dumps(resp, ensure_ascii=False)
            key = (entry["tag"], int(entry["ordinal"]))
            if key in script:
                raise ValueError(f"duplicate script entry for {key}")
            script[key] = resp
        return cls(script)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        return cls.from_entries(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            ordinal = self._counters.get(req.tag, 0)
            self._counters[req.tag] = ordinal + 1
            self.calls.append(req)
        try:
            text = self.script[(req.tag, ordinal)]
        except KeyError:
            raise ScriptExhausted(req.tag, ordinal) from None
        return ChatResponse(text=text, prompt_tokens=0, completion_tokens=0, backend="mock")

    def calls_for(self, tag: str) -> list[ChatRequest]:
        return [c for c in self.calls if c.tag == tag]


def make_backend(cfg: BackendConfig) -> Backend:
    cfg.validate()
    if cfg.kind is BackendKind.MOCK:
        return MockBackend.from_file(cfg.script_path)
    return LiveBackend(cfg)


# -- templates ---------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
_SECTION = re.compile(r"^\[(system|user)\]\s*$", re.MULTILINE)


def render(template: str, values: dict[str, Any]) -> str:
    """Substitute ``{{name}}`` placeholders in a single pass.

    Substituted text is not re-scanned, so novel text that happens to contain
    braces is inserted verbatim.
    """
    missing = sorted({m.group(1) for m in _PLACEHOLDER.finditer(template)} - values.keys())
    if missing:
        raise TemplateError(f"missing template values: {', '.join(missing)}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str

    @classmethod
    def parse(cls, name: str, text: str) -> "PromptTemplate":
        parts = _SECTION.split(text)
        sections = dict(zip(parts[1::2], (p.strip("\n") for p in parts[2::2])))
        if "system" not in sections or "user" not in sections:
            raise TemplateError(f"template {name!r} needs [system] and [user] sections")
        return cls(name, sections["system"], sections["user"])

    def request(self, tag: str, temperature: float = 0.0, max_tokens: int = 2048, **values: Any) -> ChatRequest:
        return ChatRequest(
            system_prompt=render(self.system, values),
            user_prompt=render(self.user, values),
            tag=tag,
            temperature=temperature,
            max_tokens=max_tokens,
        )


_template_dir: Path | None = None


def set_template_dir(path: str | Path | None) -> None:
    """Point template lookup at a directory of overrides (None restores the packaged set)."""
    global _template_dir
    _template_dir = Path(path) if path else None


def load_template(name: str) -> PromptTemplate:
    if _template_dir is not None and (_template_dir / f"{name}.txt").is_file():
        text = (_template_dir / f"{name}.txt").read_text(encoding="utf-8")
    else:
        try:
            text = resources.files("plotloom").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise TemplateError(f"no template named {name!r}") from None
    return PromptTemplate.parse(name, text)


# -- structured output -------------------------------------------------------

M = TypeVar("M", bound=BaseModel)

_FENCE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n(.*?)```", re.DOTALL)


class Parsed(NamedTuple):
    value: Any
    repair_count: int


def strip_fences(raw: str) -> str:
    m = _FENCE.search(raw)
    return m.group(1) if m else raw


def _first_json_value(text: str) -> Any:
    starts = [i for i in (text.find("{"), text.find("[")) if i >= 0]
    if not starts:
        raise MalformedOutput("no JSON object or array in output", text)
    try:
        value, _ = json.JSONDecoder().raw_decode(text, min(starts))
    except json.JSONDecodeError as exc:
        raise MalformedOutput(f"invalid JSON: {exc}", text) from exc
    return value


def _validate(raw: str, schema: type[M], check: Callable[[M], None] | None) -> M:
    data = _first_json_value(strip_fences(raw))
    list_fields = [n for n, f in schema.model_fields.items() if f.is_required()]
    if isinstance(data, list) and len(list_fields) == 1:
        # a bare list is accepted for single-field list payloads
        data = {list_fields[0]: data}
    try:
        value = schema.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(p) for p in err["loc"]]
        names = [p for p in err["loc"] if isinstance(p, str)]
        raise SchemaViolation(
            names[-1] if names else (loc[-1] if loc else schema.__name__),
            err["msg"],
            raw,
            path=".".join(loc),
        ) from exc
    if check is not None:
        check(value)
    return value


def parse_structured(
    raw: str,
    schema: type[M],
    repair: Callable[[str, str], str] | None = None,
    check: Callable[[M], None] | None = None,
) -> Parsed:
    """Parse and validate a model response against ``schema``.

    Code fences are stripped and the first JSON value is decoded. On failure,
    and only when ``repair`` is given, ``repair(error_message, raw)`` is
    called exactly once for a corrected response. ``check`` runs extra
    validation and should raise :class:`SchemaViolation`.
    """
    try:
        return Parsed(_validate(raw, schema, check), 0)
    except MalformedOutput as exc:
        if repair is None:
            raise
        log.info("structured output rejected (%s); requesting one repair", exc)
        fixed = repair(str(exc), raw)
    return Parsed(_validate(fixed, schema, check), 1)


def repairer(backend: Backend, req: ChatRequest) -> Callable[[str, str], str]:
    """Repair closure that re-prompts ``backend`` under tag ``<tag>:repair``."""

    def _repair(error: str, raw: str) -> str:
        tmpl = load_template("repair")
        fix = tmpl.request(
            f"{req.tag}:repair",
            temperature=req.temperature,
            max_tokens=req.max_tokens,
            original_prompt=req.user_prompt,
            previous_output=raw,
            error=error,
        )
        return backend.complete(fix).text

    return _repair


def ask_structured(
    backend: Backend,
    req: ChatRequest,
    schema: type[M],
    check: Callable[[M], None] | None = None,
) -> Parsed:
    """Send ``req`` and parse the reply, allowing one repair round."""
    raw = backend.complete(req).text
    return parse_structured(raw, schema, repairer(backend, req), check)
