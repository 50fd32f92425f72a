"""Agent execution: chat-completion backends, answer parsing, batch runs.

Two backends share one interface. ``RemoteBackend`` posts the persona prompt
as a single user message to an OpenAI-compatible ``/chat/completions``
endpoint. ``MockBackend`` is a deterministic stand-in that decodes the persona
back out of the prompt and answers through a fixed semantic crosswalk; it is
the offline oracle the test-suite and the acceptance checks run against.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .persona import ExpansionTable, PersonaProfile, PromptFormat, ScenarioDefinition
from .scales import DOMAINS, ResponseVector, ScaleDefinition, data_path, score

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-3.5-turbo-0125"
DEFAULT_TEMPERATURE = 1.0
ENV_KEY = "PSYCHOFORGE_API_KEY"
ENV_BASE = "PSYCHOFORGE_API_BASE"
DEFAULT_BASE = "https://api.openai.com/v1"


class ConfigurationError(RuntimeError):
    pass


class BackendError(RuntimeError):
    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class ParseError(ValueError):
    """Structured parse failure; ``key`` names the offending entry when there is one."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class BatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    prompt: str
    model_name: str = DEFAULT_MODEL
    temperature: float = DEFAULT_TEMPERATURE
    max_retries: int = 3

    def __post_init__(self):
        if not self.prompt:
            raise ValueError(f"agent {self.agent_id!r}: empty prompt")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"agent {self.agent_id!r}: temperature must be finite and >= 0")

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(self.prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    attempts: int = 1


@dataclass(frozen=True)
class AnswerSchema:
    keys: tuple[str, ...]
    low: int
    high: int

    @classmethod
    def for_scale(cls, scale: ScaleDefinition) -> "AnswerSchema":
        return cls(tuple(it.text for it in scale.items), scale.response_min, scale.response_max)

    @classmethod
    def for_battery(cls, scenarios: Sequence[ScenarioDefinition]) -> "AnswerSchema":
        lo, hi = scenarios[0].response_range
        return cls(tuple(sc.name for sc in scenarios), lo, hi)


@dataclass(frozen=True)
class ParsedAnswers:
    answers: dict[str, int]
    raw_text: str
    attempts: int = 1


# -- parsing -----------------------------------------------------------------

_FENCE = re.compile(r"```[A-Za-z0-9_-]*\s*(.*?)```", re.DOTALL)
_LEAD_NUMBER = re.compile(r"^\d+\s*[.)]\s*")


def _norm_key(key: str) -> str:
    key = _LEAD_NUMBER.sub("", key.strip())
    return re.sub(r"[\s_]+", "", key).lower()


def _extract_object(text: str) -> dict:
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    decoder = json.JSONDecoder()
    for chunk in candidates:
        for start in (m.start() for m in re.finditer(r"\{", chunk)):
            try:
                obj, _ = decoder.raw_decode(chunk, start)
            except ValueError:
                continue
            if isinstance(obj, dict):
                return obj
    raise ParseError("no JSON object found in response")


def _as_int(value, key: str) -> int:
    if isinstance(value, bool):
        raise ParseError(f"value for {key!r} is not a number", key)
    if isinstance(value, str):
        try:
            value = float(value.strip())
        except ValueError:
            raise ParseError(f"value for {key!r} is not a number: {value!r}", key) from None
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value != int(value):
        raise ParseError(f"value for {key!r} is not an integer: {value!r}", key)
    return int(value)


def parse_answers(raw: str | bytes, schema: AnswerSchema, attempts: int = 1) -> ParsedAnswers:
    """Validate a model reply against the expected keys and range.

    Code fences and surrounding prose are ignored; keys match
    case-insensitively, ignoring whitespace, underscores and leading
    numbering. Any failure surfaces as :class:`ParseError`.
    """
    try:
        text = raw.decode("utf-8", errors="replace") if isinstance(raw, (bytes, bytearray)) else str(raw)
        obj = _extract_object(text)
        wanted = {_norm_key(k): k for k in schema.keys}
        if not any(_norm_key(str(k)) in wanted for k in obj) and len(obj) == 1:
            inner = next(iter(obj.values()))
            if isinstance(inner, dict):
                obj = inner
        got: dict[str, int] = {}
        for k, v in obj.items():
            nk = _norm_key(str(k))
            if nk not in wanted:
                raise ParseError(f"unexpected key {k!r}", str(k))
            canon = wanted[nk]
            if canon in got:
                raise ParseError(f"duplicate key {canon!r}", canon)
            val = _as_int(v, canon)
            if not schema.low <= val <= schema.high:
                raise ParseError(f"value {val} for {canon!r} outside [{schema.low}, {schema.high}]", canon)
            got[canon] = val
        for k in schema.keys:
            if k not in got:
                raise ParseError(f"missing key {k!r}", k)
    except ParseError:
        raise
    except Exception as exc:  # parser must stay total on arbitrary input
        raise ParseError(f"unparseable payload ({type(exc).__name__})") from None
    return ParsedAnswers({k: got[k] for k in schema.keys}, text, attempts)


# -- mock agent ----------------------------------------------------------------

@dataclass(frozen=True)
class MockCrosswalk:
    adjectives: Mapping[str, tuple[tuple[str, int], ...]]
    scenario_weights: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def validate(self, bfi2: ScaleDefinition, questionnaire: ScaleDefinition) -> None:
        for it in questionnaire.items:
            pairs = self.adjectives.get(it.id)
            if not pairs:
                raise ValueError(f"crosswalk has no BFI2 items for adjective {it.id!r}")
            for item_id, sign in pairs:
                target = bfi2.item(item_id)
                expected = 1 if target.keying == it.keying else -1
                if sign != expected:
                    raise ValueError(f"crosswalk sign for {it.id!r} -> {item_id!r} contradicts keying")

    def with_weights(self, weights: Mapping[str, Mapping[str, float]]) -> "MockCrosswalk":
        return MockCrosswalk(self.adjectives, dict(weights))


def load_crosswalk(path: str | Path | None = None) -> MockCrosswalk:
    path = Path(path) if path else data_path("crosswalk.json")
    doc = json.loads(path.read_text(encoding="utf-8"))
    adj = {a: tuple((m["item"], int(m["sign"])) for m in pairs) for a, pairs in doc["adjectives"].items()}
    return MockCrosswalk(adj, doc.get("scenario_weights", {}))


def _round_clamp(x: float, lo: int, hi: int) -> int:
    return int(min(hi, max(lo, math.floor(x + 0.5))))


def mock_complete(
    profile: PersonaProfile,
    crosswalk: MockCrosswalk,
    noise_sd: float,
    seed: int,
    bfi2: ScaleDefinition,
    questionnaire: ScaleDefinition | None = None,
    battery: Sequence[ScenarioDefinition] | None = None,
) -> str:
    """Deterministic JSON reply for a persona.

    Questionnaire mode: each adjective is the sign-reflected mean of its mapped
    BFI2 answers plus Gaussian noise (``noise_sd`` in BFI2 answer units),
    rescaled to the questionnaire range, rounded and clamped.

    Scenario mode: a weighted sum of centred domain scores, normalised to
    [-1, 1], is mapped onto the BFI2 range, perturbed the same way, rescaled
    to 1..10 and finally reflected, because the prompts put risk-taking and
    empathy at 1.
    """
    rng = np.random.default_rng(seed)
    answers = profile.bfi2.answers
    b_lo, b_hi = bfi2.response_min, bfi2.response_max
    if battery is None:
        if questionnaire is None:
            raise ValueError("questionnaire mode needs the questionnaire scale")
        q_lo, q_hi = questionnaire.response_min, questionnaire.response_max
        out = {}
        for it in questionnaire.items:
            pairs = crosswalk.adjectives.get(it.id)
            if not pairs:
                raise ValueError(f"crosswalk has no BFI2 items for adjective {it.id!r}")
            vals = [answers[i] if s > 0 else b_lo + b_hi - answers[i] for i, s in pairs]
            m = sum(vals) / len(vals) + noise_sd * rng.standard_normal()
            v = q_lo + (m - b_lo) * (q_hi - q_lo) / (b_hi - b_lo)
            out[it.text] = _round_clamp(v, q_lo, q_hi)
        return json.dumps(out)

    doms = score(profile.bfi2, bfi2).domain_scores
    mid, half = (b_lo + b_hi) / 2, (b_hi - b_lo) / 2
    out = {}
    for sc in battery:
        w = crosswalk.scenario_weights.get(sc.name)
        if w is None:
            raise ValueError(f"crosswalk has no weights for scenario {sc.name!r}")
        total = sum(abs(w.get(d, 0.0)) for d in DOMAINS)
        s = sum(w.get(d, 0.0) * (doms[d] - mid) / half for d in DOMAINS) / total if total else 0.0
        m = mid + half * s + noise_sd * rng.standard_normal()
        lo, hi = sc.response_range
        v = lo + (m - b_lo) * (hi - lo) / (b_hi - b_lo)
        out[sc.name] = lo + hi - _round_clamp(v, lo, hi)
    return json.dumps(out)


class MockDecodeError(ValueError):
    pass


_PERSONA_HEADERS = ("### Your Assigned Personality ###", "### Your Personality ###", "### Personality ###")


def decode_persona(prompt: str, bfi2: ScaleDefinition, table: ExpansionTable) -> PersonaProfile:
    """Recover the BFI2 answers rendered into a persona prompt."""
    lines = prompt.split("\n")
    try:
        head = next(k for k, ln in enumerate(lines) if ln.strip() in _PERSONA_HEADERS)
    except StopIteration:
        raise MockDecodeError("prompt carries no persona section") from None
    likert = lines[head].strip() == _PERSONA_HEADERS[0]
    body = lines[head + 2 : head + 2 + len(bfi2.items)] if likert else lines[head + 1 : head + 1 + len(bfi2.items)]
    if len(body) != len(bfi2.items):
        raise MockDecodeError("persona section is truncated")
    answers = {}
    for it, ln in zip(bfi2.items, body):
        try:
            if likert:
                text, val = ln.rstrip(";").rsplit(": ", 1)
                if text != it.text:
                    raise ValueError
                answers[it.id] = int(val)
            else:
                answers[it.id] = table.level_of(it.id, ln)
        except ValueError:
            raise MockDecodeError(f"cannot decode persona line for {it.id!r}: {ln!r}") from None
    fmt = PromptFormat.LIKERT if likert else PromptFormat.EXPANDED
    return PersonaProfile("decoded", ResponseVector(bfi2.name, answers), fmt)


def derive_seed(root: int, *parts: str) -> int:
    h = hashlib.sha256(repr((int(root),) + tuple(parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class Backend(Protocol):
    name: str

    def complete(self, spec: AgentSpec) -> Completion: ...


@dataclass
class MockBackend:
    bfi2: ScaleDefinition
    questionnaire: ScaleDefinition
    table: ExpansionTable
    crosswalk: MockCrosswalk
    batteries: Mapping[str, Sequence[ScenarioDefinition]]
    noise_sd: float = 0.0
    seed: int = 0
    name: str = "mock"

    def complete(self, spec: AgentSpec) -> Completion:
        profile = decode_persona(spec.prompt, self.bfi2, self.table)
        if "### Questionnaire Item ###" in spec.prompt:
            kind, battery = "questionnaire", None
        else:
            kind = next(
                (b for b, scs in self.batteries.items() if all(f"Scenario Name: {s.name}\n" in spec.prompt for s in scs)),
                None,
            )
            if kind is None:
                raise MockDecodeError("prompt is neither a questionnaire nor a known scenario battery")
            battery = self.batteries[kind]
        seed = derive_seed(self.seed, spec.agent_id, kind)
        text = mock_complete(profile, self.crosswalk, self.noise_sd, seed, self.bfi2, self.questionnaire, battery)
        return Completion(text, 1)


RETRYABLE = {408, 409, 429, 500, 502, 503, 504}


@dataclass
class RemoteBackend:
    """OpenAI-compatible chat-completions client with exponential backoff."""

    api_key: str
    base_url: str = DEFAULT_BASE
    backoff: float = 1.0
    max_backoff: float = 30.0
    timeout: float = 60.0
    name: str = "remote"

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteBackend":
        key = os.environ.get(ENV_KEY)
        if not key:
            raise ConfigurationError(f"remote backend requires {ENV_KEY} in the environment")
        return cls(api_key=key, base_url=os.environ.get(ENV_BASE, DEFAULT_BASE), **kwargs)

    def complete(self, spec: AgentSpec) -> Completion:
        url = self.base_url.rstrip("/") + "/chat/completions"
        payload = {
            "model": spec.model_name,
            "temperature": spec.temperature,
            "messages": [{"role": "user", "content": spec.prompt}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        attempts = 0
        last = ""
        while True:
            attempts += 1
            try:
                r = httpx.post(url, json=payload, headers=headers, timeout=self.timeout)
                if r.status_code == 200:
                    return Completion(r.json()["choices"][0]["message"]["content"], attempts)
                last = f"HTTP {r.status_code}"
                if r.status_code not in RETRYABLE:
                    raise BackendError(f"{spec.agent_id}: {last}: {r.text[:200]}", attempts)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            except (KeyError, IndexError, ValueError) as exc:
                raise BackendError(f"{spec.agent_id}: malformed completion body ({exc})", attempts) from None
            if attempts > spec.max_retries:
                raise BackendError(f"{spec.agent_id}: giving up after {attempts} attempts ({last})", attempts)
            delay = min(self.max_backoff, self.backoff * 2 ** (attempts - 1))
            log.warning("%s: %s, retry %d in %.2fs", spec.agent_id, last, attempts, delay)
            time.sleep(delay)


def complete(spec: AgentSpec, backend: Backend) -> Completion:
    return backend.complete(spec)


class TranscriptStore:
    """Append-only JSONL log; a lock serialises writers."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, agent_id: str, prompt_hash: str, raw: str, attempts: int) -> None:
        rec = {
            "agent_id": agent_id,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "prompt_hash": prompt_hash,
            "raw_response": raw,
            "attempts": attempts,
        }
        line = json.dumps(rec, ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self.path.open(encoding="utf-8") as fh:
            return [json.loads(ln) for ln in fh if ln.strip()]


@dataclass
class BatchResult:
    agent_ids: list[str]
    results: list[ParsedAnswers | None]
    failures: dict[str, str]

    @property
    def succeeded(self) -> list[tuple[str, ParsedAnswers]]:
        return [(a, r) for a, r in zip(self.agent_ids, self.results) if r is not None]


def run_agent(
    spec: AgentSpec,
    backend: Backend,
    schema: AnswerSchema,
    transcript: TranscriptStore | None = None,
    max_reasks: int = 1,
) -> ParsedAnswers:
    """Complete and parse one agent, re-asking once on a malformed answer."""
    attempts = 0
    while True:
        c = complete(spec, backend)
        attempts += c.attempts
        if transcript is not None:
            transcript.append(spec.agent_id, spec.prompt_hash, c.text, attempts)
        try:
            return parse_answers(c.text, schema, attempts)
        except ParseError as exc:
            if max_reasks <= 0:
                raise
            max_reasks -= 1
            log.info("%s: %s; re-asking", spec.agent_id, exc)


def run_batch(
    specs: Sequence[AgentSpec],
    backend: Backend,
    schema: AnswerSchema,
    concurrency: int = 8,
    transcript: TranscriptStore | None = None,
    max_reasks: int = 1,
) -> BatchResult:
    """Run agents concurrently; results come back in input order.

    A failing agent is recorded and skipped. Only a batch in which every agent
    fails raises.
    """
    if not specs:
        raise ValueError("run_batch needs at least one agent")

    def one(spec: AgentSpec):
        try:
            return run_agent(spec, backend, schema, transcript, max_reasks), None
        except (ParseError, BackendError, MockDecodeError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        outcomes = list(pool.map(one, specs))
    failures = {s.agent_id: err for s, (_, err) in zip(specs, outcomes) if err is not None}
    if len(failures) == len(specs):
        first = next(iter(failures.values()))
        raise BatchError(f"all {len(specs)} agents failed; first error: {first}")
    return BatchResult([s.agent_id for s in specs], [r for r, _ in outcomes], failures)
