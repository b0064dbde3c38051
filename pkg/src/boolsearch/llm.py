"""Prompt rendering, chat-completion backends and Boolean-query extraction."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence, Union

import httpx

from .corpus import Topic
from .entrez import RateLimiter
from .query import check_rules

__all__ = [
    "PROMPT_KINDS",
    "Backend",
    "BackendError",
    "ChatCompletionsBackend",
    "ChatRequest",
    "Completion",
    "GenerationConfig",
    "MissingPlaceholder",
    "NoQueryFound",
    "PromptTemplate",
    "ReplayBackend",
    "ScriptedBackend",
    "extract_query",
    "fallback_extract",
    "generate",
    "load_templates",
    "render_prompt",
]

log = logging.getLogger(__name__)

OUTPUT_MODES = ("plain_text", "json", "system_json")

PROMPT_KINDS = {
    "p1": "formulation_zero_shot",
    "p2": "formulation_zero_shot",
    "p3": "formulation_zero_shot",
    "p4": "formulation_one_shot",
    "p5": "formulation_one_shot",
    "p6": "refinement_zero_shot",
    "p7": "refinement_one_shot",
    "guided": "guided",
}

_REQUIRED = {
    "formulation_zero_shot": {"topic_title"},
    "formulation_one_shot": {"topic_title", "example_query"},
    "refinement_zero_shot": {"topic_title", "query_to_refine"},
    "refinement_one_shot": {"topic_title", "query_to_refine", "example_query"},
    "guided": {"topic_title", "seed_studies"},
}

JSON_INSTRUCTION = (
    'Respond with a single JSON object of the form {"query": "<Boolean query>"} and nothing else.'
)

SECTION_BREAK = "\n---\n"


class MissingPlaceholder(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"placeholder {{{self.name}}} is not bound"


class BackendError(RuntimeError):
    def __init__(self, message: str, transient: bool = False):
        super().__init__(message)
        self.transient = transient


class NoQueryFound(ValueError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    backend_id: str
    temperature: float = 1.0
    random_seed: int = 42
    output_mode: str = "plain_text"
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt asset: an instruction preamble plus topic material.

    The two parts are separated by a ``---`` line in the asset file.  In the
    plain-text and JSON modes they are sent together as one user message.
    """

    prompt_id: str
    preamble: str
    material: str

    def __post_init__(self) -> None:
        missing = _REQUIRED.get(self.kind, set()) - self.placeholders
        if missing:
            raise ValueError(f"template {self.prompt_id} lacks placeholder(s) {sorted(missing)}")

    @property
    def kind(self) -> str:
        return PROMPT_KINDS.get(self.prompt_id, "auxiliary")

    @property
    def placeholders(self) -> set[str]:
        fmt = string.Formatter()
        return {f for part in (self.preamble, self.material) for _, f, _, _ in fmt.parse(part) if f}

    @property
    def body(self) -> str:
        return self.preamble + SECTION_BREAK + self.material

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.body.encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, prompt_id: str, text: str) -> "PromptTemplate":
        preamble, sep, material = text.strip("\n").partition(SECTION_BREAK)
        if not sep:
            preamble, material = "", preamble
        return cls(prompt_id, preamble.strip(), material.strip())


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load ``<prompt_id>.txt`` assets, defaulting to the packaged ones."""
    if directory is None:
        root = resources.files("boolsearch") / "prompts"
        items = [(p.name, p.read_text(encoding="utf-8")) for p in root.iterdir() if p.name.endswith(".txt")]
    else:
        items = [(p.name, p.read_text(encoding="utf-8")) for p in sorted(Path(directory).glob("*.txt"))]
    templates = {}
    for name, text in sorted(items):
        prompt_id = name[: -len(".txt")]
        if prompt_id in PROMPT_KINDS:
            templates[prompt_id] = PromptTemplate.from_text(prompt_id, text)
    return templates


def load_extractor_instruction(directory: str | Path | None = None) -> PromptTemplate:
    if directory is not None and (Path(directory) / "extractor.txt").exists():
        text = (Path(directory) / "extractor.txt").read_text(encoding="utf-8")
    else:
        text = (resources.files("boolsearch") / "prompts" / "extractor.txt").read_text(encoding="utf-8")
    preamble, _, material = text.strip("\n").partition(SECTION_BREAK)
    return PromptTemplate("extractor", preamble.strip(), material.strip())


@dataclass(frozen=True)
class ChatRequest:
    user_message: str
    config: GenerationConfig
    system_message: str | None = None

    def messages(self) -> list[dict[str, str]]:
        msgs = []
        if self.system_message:
            msgs.append({"role": "system", "content": self.system_message})
        msgs.append({"role": "user", "content": self.user_message})
        return msgs

    def digest(self) -> str:
        payload = json.dumps(
            {"messages": self.messages(), "config": asdict(self.config)}, sort_keys=True
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class _Bindings(dict):
    def __missing__(self, key: str) -> str:
        raise MissingPlaceholder(key)


def render_prompt(
    template: PromptTemplate,
    topic: Topic | None,
    bindings: Mapping[str, str] | None = None,
    mode: str | None = None,
    config: GenerationConfig | None = None,
) -> ChatRequest:
    """Fill a template and lay it out according to the output mode.

    ``topic_title`` is taken from ``topic`` unless bound explicitly.  In
    ``system_json`` mode the preamble and the JSON instruction go to the system
    message and the user message carries only the topic material.
    """
    config = config or GenerationConfig("unspecified")
    mode = mode or config.output_mode
    if mode not in OUTPUT_MODES:
        raise ValueError(f"unknown output mode {mode!r}")
    config = replace(config, output_mode=mode)
    values = _Bindings(bindings or {})
    if topic is not None:
        values.setdefault("topic_title", topic.title)
    preamble = template.preamble.format_map(values)
    material = template.material.format_map(values)

    if mode == "system_json":
        system = "\n\n".join(p for p in (preamble, JSON_INSTRUCTION) if p)
        return ChatRequest(material, config, system)
    user = "\n\n".join(p for p in (preamble, material) if p)
    if mode == "json":
        user += "\n\n" + JSON_INSTRUCTION
    return ChatRequest(user, config)


# --- backends -----------------------------------------------------------------


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Mapping[str, int] | None = None


class Backend(Protocol):
    backend_id: str

    def complete(self, request: ChatRequest) -> Completion: ...


def generate(request: ChatRequest, backend: Backend) -> str:
    """Return the backend's completion text verbatim."""
    completion = backend.complete(request)
    if completion.usage:
        log.debug("%s usage: %s", backend.backend_id, dict(completion.usage))
    return completion.text


ScriptItem = Union[str, BaseException, Callable[[ChatRequest], str]]


class ScriptedBackend:
    """Deterministic stand-in that replays a fixed list of outputs.

    Items may be strings, exceptions (raised when reached) or callables
    receiving the request.  Once the script is exhausted the backend raises a
    permanent :class:`BackendError`.  ``calls`` counts every request.
    """

    def __init__(self, script: Iterable[ScriptItem], backend_id: str = "scripted"):
        self.backend_id = backend_id
        self._script = list(script)
        self._pos = 0
        self._lock = threading.Lock()
        self.calls = 0
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> Completion:
        with self._lock:
            self.calls += 1
            self.requests.append(request)
            if self._pos >= len(self._script):
                raise BackendError(f"{self.backend_id}: script exhausted", transient=False)
            item = self._script[self._pos]
            self._pos += 1
        if isinstance(item, BaseException):
            raise item
        if callable(item):
            item = item(request)
        return Completion(item)


class ChatCompletionsBackend:
    """OpenAI-compatible ``/chat/completions`` client.

    The API key is read from the environment variable named by
    ``api_key_env``; it never appears in configuration files.  Backends that
    ignore sampling parameters list them in ``unsupported``.
    """

    def __init__(
        self,
        backend_id: str,
        endpoint: str,
        model: str | None = None,
        api_key_env: str | None = None,
        rate_limit: float = 5.0,
        timeout: float = 120.0,
        unsupported: Sequence[str] = (),
        json_response_format: bool = True,
        transport: httpx.BaseTransport | None = None,
    ):
        self.backend_id = backend_id
        self.endpoint = endpoint.rstrip("/")
        self.model = model or backend_id
        self.api_key_env = api_key_env
        self.unsupported = frozenset(unsupported)
        self.json_response_format = json_response_format
        self._gate = RateLimiter(rate_limit)
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def api_key(self) -> str | None:
        if not self.api_key_env:
            return None
        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendError(f"environment variable {self.api_key_env} is not set", transient=False)
        return key

    def payload(self, request: ChatRequest) -> dict:
        cfg = request.config
        body: dict = {
            "model": self.model,
            "messages": request.messages(),
            "max_tokens": cfg.max_output_tokens,
        }
        if "temperature" not in self.unsupported:
            body["temperature"] = cfg.temperature
        if "seed" not in self.unsupported:
            body["seed"] = cfg.random_seed
        if cfg.output_mode != "plain_text" and self.json_response_format:
            body["response_format"] = {"type": "json_object"}
        return body

    def complete(self, request: ChatRequest) -> Completion:
        headers = {"Content-Type": "application/json"}
        key = self.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._gate.wait()
        try:
            resp = self._http.post(
                f"{self.endpoint}/chat/completions", json=self.payload(request), headers=headers
            )
        except httpx.TransportError as exc:
            raise BackendError(f"{self.backend_id}: {exc}", transient=True) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendError(f"{self.backend_id}: HTTP {resp.status_code}", transient=True)
        if resp.status_code != 200:
            raise BackendError(f"{self.backend_id}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError):
            raise BackendError(f"{self.backend_id}: malformed completion payload") from None
        return Completion(text, data.get("usage"))


_FILE_LOCKS: dict[Path, threading.Lock] = {}
_FILE_LOCKS_GUARD = threading.Lock()


def _file_lock(path: Path) -> threading.Lock:
    with _FILE_LOCKS_GUARD:
        return _FILE_LOCKS.setdefault(path.resolve(), threading.Lock())


class ReplayBackend:
    """Append-only completion cache in front of another backend.

    Entries are keyed by the request digest and by how many times that same
    request has been issued in this session, so regenerating with an identical
    prompt replays successive completions instead of the first one forever.
    Without an inner backend the cache is read-only and a miss is a permanent
    error.
    """

    def __init__(self, path: str | Path, inner: Backend | None = None, backend_id: str | None = None):
        self.path = Path(path)
        self.inner = inner
        self.backend_id = backend_id or (inner.backend_id if inner else "replay")
        self._lock = _file_lock(self.path)
        self._seen: dict[str, int] = {}
        self._entries: dict[tuple[str, int], dict] = {}
        self.hits = 0
        self.misses = 0
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        self._entries[(entry["key"], entry["ordinal"])] = entry

    def complete(self, request: ChatRequest) -> Completion:
        key = request.digest()
        with self._lock:
            ordinal = self._seen.get(key, 0)
            self._seen[key] = ordinal + 1
            entry = self._entries.get((key, ordinal))
        if entry is not None:
            self.hits += 1
            return Completion(entry["text"], entry.get("usage"))
        if self.inner is None:
            raise BackendError(f"replay cache miss for request {key[:12]}#{ordinal}")
        completion = self.inner.complete(request)
        record = {"key": key, "ordinal": ordinal, "text": completion.text, "usage": completion.usage}
        with self._lock:
            self.misses += 1
            self._entries[(key, ordinal)] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return completion


# --- extraction ---------------------------------------------------------------

_UPPER_OP = re.compile(r"\b(?:AND|OR|NOT)\b")
_LABEL = re.compile(r"^\s*(?:[*_#>`-]+\s*)?[A-Za-z][A-Za-z ()/-]{0,40}:\s*")
_FENCE = re.compile(r"```[A-Za-z]*\n(.*?)```", re.S)


def _structural(raw: str) -> str | None:
    text = raw.strip()
    fence = _FENCE.search(text)
    candidates = [text]
    if fence:
        candidates.append(fence.group(1).strip())
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        candidates.append(text[start : end + 1])
    for cand in candidates:
        try:
            obj = json.loads(cand)
        except ValueError:
            continue
        if isinstance(obj, dict) and isinstance(obj.get("query"), str) and obj["query"].strip():
            return obj["query"].strip()
    return None


def _paren_spans(text: str) -> list[tuple[int, int]]:
    """Balanced spans that open with '(' and close with ')' within one paragraph."""
    spans = []
    n = len(text)
    for i, ch in enumerate(text):
        if ch != "(":
            continue
        depth = 0
        quoted = False
        j = i
        while j < n:
            c = text[j]
            if c in '"“”':
                quoted = not quoted
            elif not quoted and c == "(":
                depth += 1
            elif not quoted and c == ")":
                depth -= 1
                if depth == 0:
                    spans.append((i, j + 1))
                elif depth < 0:
                    break
            elif c == "\n" and text.startswith("\n", j + 1):
                break
            j += 1
    return spans


def _strip_label(line: str) -> str:
    """Drop a leading ``Some label:`` preamble that precedes the query proper."""
    first = min((i for i in (line.find(c) for c in '(["') if i >= 0), default=len(line))
    cut = line.rfind(": ", 0, first)
    if cut >= 0:
        return line[cut + 2 :].strip()
    return _LABEL.sub("", line, count=1).strip()


# a line that only introduces what follows ("Final query:"), never part of a query
_LABEL_LINE = re.compile(r"^[^\S\n]*[^()\n]*:[^\S\n]*$", re.M)


def _line_candidates(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        line = line.strip().strip("`").strip()
        if not _UPPER_OP.search(line):
            continue
        stripped = _strip_label(line)
        out.append(stripped if _UPPER_OP.search(stripped) else line)
    return out


def fallback_extract(raw: str) -> str:
    """Pick the most query-like contiguous span of ``raw`` without an LLM.

    Candidates are balanced parenthesised spans and whole lines that contain
    an upper-case AND/OR/NOT.  The longest candidate that passes the syntax
    rules wins; failing that, the longest parenthesised span, then the longest
    line.
    """
    spans = [raw[i:j] for i, j in _paren_spans(raw)]
    spans = [s for s in spans if _UPPER_OP.search(s) and not _LABEL_LINE.search(s)]
    lines = _line_candidates(raw)
    valid = [c for c in spans + lines if check_rules(c).valid]
    for pool in (valid, spans, lines):
        if pool:
            return max(pool, key=len)
    raise NoQueryFound("no Boolean operator found in model output")


def _clean_reply(reply: str) -> str:
    fence = _FENCE.search(reply)
    text = fence.group(1) if fence else reply
    return text.strip().strip("`").strip()


def extract_query(
    raw: str,
    extractor_backend: Backend | None = None,
    mode: str = "plain_text",
    extractor_config: GenerationConfig | None = None,
    instruction: PromptTemplate | None = None,
) -> str:
    """Isolate the Boolean query from a model's raw output.

    JSON modes first read the ``query`` key.  Otherwise, or when that fails,
    the extractor backend is asked at temperature 0; with no backend the
    deterministic :func:`fallback_extract` heuristic is used.
    """
    if mode in ("json", "system_json"):
        found = _structural(raw)
        if found:
            return found
    if extractor_backend is None:
        return fallback_extract(raw)
    instruction = instruction or load_extractor_instruction()
    config = extractor_config or GenerationConfig(extractor_backend.backend_id, temperature=0.0)
    request = render_prompt(instruction, None, {"raw_output": raw}, "plain_text", config)
    reply = _clean_reply(generate(request, extractor_backend))
    if not reply or reply.upper() == "NONE":
        raise NoQueryFound("extractor found no Boolean query")
    return reply
