"""Access to the three LLM roles (instructor, coder, judge) plus embeddings.

One wire protocol everywhere: JSON chat-completions over HTTP. Each role can
bind to a different endpoint and model; API keys come from named environment
variables at request time and are never written to disk. A scripted mock
backend replays canned replies per role for deterministic offline runs, and
the embedding provider has an offline hashed-projection fallback.

This module also owns the response grammars shared by the structuring and
evolution stages: section/fence parsing for generated quadruplet material,
the judge's PASS/FAIL line, and the duplicate verifier's verdict word.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

import numpy as np
import requests

from .model import CandidatePair, check_candidate_triple, canonical_id, normalize

log = logging.getLogger("taskmill.gateway")

EMBED_PERSON = b"tm-embed"
DEFAULT_EMBED_DIM = 384


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Delivery failed after all retry attempts."""


class ProtocolError(GatewayError):
    """The endpoint answered with a body we cannot interpret."""


class ScriptExhausted(GatewayError):
    """A mock role queue ran out of canned replies."""


class ParseError(GatewayError):
    """Model output violated the response grammar; message names the rule."""


class Role(str, Enum):
    INSTRUCTOR = "instructor"
    CODER = "coder"
    JUDGE = "judge"


@dataclass(frozen=True)
class ChatRequest:
    role_name: Role
    messages: tuple[tuple[str, str], ...]
    temperature: float
    max_tokens: int
    request_id: str

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("ChatRequest: messages must be non-empty")
        speakers = {m[0] for m in self.messages}
        if not speakers <= {"system", "user", "assistant"}:
            raise ValueError(f"ChatRequest: unknown speaker in {speakers}")
        if self.messages[0][0] != "system":
            raise ValueError("ChatRequest: first message must be from system")
        if self.temperature < 0:
            raise ValueError("ChatRequest: temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("ChatRequest: max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str
    latency_ms: int
    attempt: int

    def __post_init__(self) -> None:
        if self.finish_reason not in ("stop", "length", "error"):
            raise ValueError(f"ChatResponse: bad finish_reason {self.finish_reason!r}")
        if not self.content and self.finish_reason != "error":
            raise ValueError("ChatResponse: empty content requires finish_reason=error")


@dataclass(frozen=True)
class ParsedStructuredOutput:
    instruction_text: str
    reasoning_text: str
    candidates: tuple[CandidatePair, ...]

    def __post_init__(self) -> None:
        check_candidate_triple(self.candidates)


# --- configuration ----------------------------------------------------------


@dataclass
class RoleConfig:
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env_var: str = ""
    temperature: float = 0.7
    max_tokens: int = 4096
    max_retries: int = 3
    concurrency: int = 8
    backoff_base_s: float = 0.5
    request_timeout_s: float = 60.0


@dataclass
class EmbeddingConfig:
    endpoint_url: str = "offline"
    model_name: str = ""
    api_key_env_var: str = ""
    dimension: int = DEFAULT_EMBED_DIM


def default_role_configs() -> dict[Role, RoleConfig]:
    return {
        Role.INSTRUCTOR: RoleConfig(temperature=0.7),
        Role.CODER: RoleConfig(temperature=0.7),
        Role.JUDGE: RoleConfig(temperature=0.0),
    }


@dataclass
class GatewayConfig:
    mode: str = "mock"  # "mock" or "http"
    roles: dict[Role, RoleConfig] = field(default_factory=default_role_configs)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    mock_script_path: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> "GatewayConfig":
        roles = default_role_configs()
        for name, overrides in data.get("roles", {}).items():
            role = Role(name)
            base = roles[role]
            for key, value in overrides.items():
                if not hasattr(base, key):
                    raise ValueError(f"gateway config: unknown role key {key!r}")
                setattr(base, key, value)
        emb = EmbeddingConfig(**data.get("embedding", {}))
        return cls(
            mode=data.get("mode", "mock"),
            roles=roles,
            embedding=emb,
            mock_script_path=data.get("mock_script_path", ""),
        )


# --- backends ---------------------------------------------------------------

# A backend's attempt() performs exactly one delivery try and returns
# ("ok", content, finish_reason) or ("retryable", detail). Fatal conditions
# raise ProtocolError / ScriptExhausted directly.


class HttpBackend:
    def attempt(
        self, role: Role, cfg: RoleConfig, payload: dict
    ) -> tuple[str, str, str]:
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env_var:
            key = os.environ.get(cfg.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                cfg.endpoint_url,
                json=payload,
                headers=headers,
                timeout=cfg.request_timeout_s,
            )
        except requests.RequestException as exc:
            return ("retryable", f"transport: {exc}", "")
        if resp.status_code == 429 or resp.status_code >= 500:
            return ("retryable", f"http {resp.status_code}", "")
        if resp.status_code != 200:
            raise ProtocolError(f"http {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
            finish = choice.get("finish_reason", "stop")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed response body: {exc}") from exc
        if not isinstance(content, str):
            raise ProtocolError("malformed response body: content is not text")
        return ("ok", content, finish)

    def embed(self, cfg: EmbeddingConfig, texts: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env_var:
            key = os.environ.get(cfg.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        resp = requests.post(
            cfg.endpoint_url,
            json={"model": cfg.model_name, "input": texts},
            headers=headers,
            timeout=60.0,
        )
        if resp.status_code != 200:
            raise TransportError(f"embedding endpoint: http {resp.status_code}")
        try:
            rows = [item["embedding"] for item in resp.json()["data"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embedding body: {exc}") from exc
        return rows


class MockBackend:
    """Replays canned replies per role, strictly in order.

    A reply is a plain string, or a dict with optional keys:
    content, finish_reason, error ("retryable" | "protocol").
    Cursors are exposed for checkpoint/resume of deterministic runs.
    """

    def __init__(self, script: dict[str, list]):
        # an empty script is allowed: it models "no calls expected" and
        # raises ScriptExhausted on first use
        self._script = {role: list(replies) for role, replies in script.items()}
        self._cursors = {role: 0 for role in script}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    @property
    def cursors(self) -> dict[str, int]:
        with self._lock:
            return dict(self._cursors)

    def set_cursors(self, cursors: dict[str, int]) -> None:
        with self._lock:
            for role, pos in cursors.items():
                if role not in self._script or not 0 <= pos <= len(self._script[role]):
                    raise ValueError(f"bad cursor for role {role!r}: {pos}")
                self._cursors[role] = pos

    def attempt(
        self, role: Role, cfg: RoleConfig, payload: dict
    ) -> tuple[str, str, str]:
        with self._lock:
            queue = self._script.get(role.value, [])
            pos = self._cursors.get(role.value, 0)
            if pos >= len(queue):
                raise ScriptExhausted(f"role {role.value}: no reply at index {pos}")
            reply = queue[pos]
            self._cursors[role.value] = pos + 1
        if isinstance(reply, str):
            return ("ok", reply, "stop")
        error = reply.get("error")
        if error == "retryable":
            return ("retryable", reply.get("detail", "scripted failure"), "")
        if error == "protocol":
            raise ProtocolError(reply.get("detail", "scripted protocol error"))
        return ("ok", reply.get("content", ""), reply.get("finish_reason", "stop"))


# --- gateway ----------------------------------------------------------------


class Gateway:
    def __init__(
        self,
        config: Optional[GatewayConfig] = None,
        backend: Optional[Any] = None,
        sleep_fn: Callable[[float], None] = time.sleep,
    ):
        self.config = config or GatewayConfig()
        if backend is not None:
            self.backend = backend
        elif self.config.mode == "mock":
            if self.config.mock_script_path:
                self.backend = MockBackend.from_file(self.config.mock_script_path)
            else:
                raise ValueError("mock mode requires mock_script_path or a backend")
        elif self.config.mode == "http":
            self.backend = HttpBackend()
        else:
            raise ValueError(f"unknown gateway mode {self.config.mode!r}")
        self._sleep = sleep_fn
        self._semaphores = {
            role: threading.Semaphore(cfg.concurrency)
            for role, cfg in self.config.roles.items()
        }
        self._counter = 0
        self._counter_lock = threading.Lock()
        self._embed_cache: dict[str, tuple[float, ...]] = {}
        self._embed_lock = threading.Lock()

    def _next_request_id(self, role: Role) -> str:
        with self._counter_lock:
            self._counter += 1
            return f"{role.value}-{self._counter:06d}"

    def chat(
        self,
        role: Role,
        messages: list[tuple[str, str]],
        temperature: Optional[float] = None,
        max_tokens: Optional[int] = None,
    ) -> ChatResponse:
        cfg = self.config.roles[role]
        req = ChatRequest(
            role_name=role,
            messages=tuple(messages),
            temperature=cfg.temperature if temperature is None else temperature,
            max_tokens=cfg.max_tokens if max_tokens is None else max_tokens,
            request_id=self._next_request_id(role),
        )
        return self.complete(req)

    def complete(self, req: ChatRequest) -> ChatResponse:
        cfg = self.config.roles[req.role_name]
        payload = {
            "model": cfg.model_name,
            "messages": [{"role": s, "content": c} for s, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        last_detail = ""
        with self._semaphores[req.role_name]:
            for attempt in range(1, cfg.max_retries + 2):
                started = time.monotonic()
                kind, a, b = self.backend.attempt(req.role_name, cfg, payload)
                latency_ms = int((time.monotonic() - started) * 1000)
                if kind == "ok":
                    log.debug(
                        "request %s ok attempt=%d latency_ms=%d",
                        req.request_id,
                        attempt,
                        latency_ms,
                    )
                    return ChatResponse(
                        content=a,
                        finish_reason=b,
                        latency_ms=latency_ms,
                        attempt=attempt,
                    )
                last_detail = a
                log.debug(
                    "request %s retryable failure attempt=%d: %s",
                    req.request_id,
                    attempt,
                    last_detail,
                )
                if attempt <= cfg.max_retries:
                    self._sleep(cfg.backoff_base_s * (2 ** (attempt - 1)))
        raise TransportError(
            f"request {req.request_id}: retries exhausted after "
            f"{cfg.max_retries + 1} attempts ({last_detail})"
        )

    # --- embeddings ---------------------------------------------------------

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed: texts must be non-empty")
        dim = self.config.embedding.dimension
        if self.config.embedding.endpoint_url == "offline" or not isinstance(
            self.backend, HttpBackend
        ):
            return [fallback_embed(t, dim) for t in texts]

        keys = [canonical_id(t) for t in texts]
        out: dict[int, np.ndarray] = {}
        missing: list[int] = []
        with self._embed_lock:
            for i, key in enumerate(keys):
                cached = self._embed_cache.get(key)
                if cached is not None:
                    out[i] = np.array(cached, dtype=np.float64)
                else:
                    missing.append(i)
        if missing:
            rows = self.backend.embed(
                self.config.embedding, [texts[i] for i in missing]
            )
            if len(rows) != len(missing):
                raise ProtocolError("embedding count mismatch")
            dims = {len(r) for r in rows}
            if len(dims) != 1:
                raise ProtocolError("dimension mismatch across embedding batch")
            with self._embed_lock:
                for i, row in zip(missing, rows):
                    vec = np.asarray(row, dtype=np.float64)
                    norm = float(np.linalg.norm(vec))
                    if norm == 0:
                        raise ProtocolError("zero-length embedding returned")
                    vec = vec / norm
                    out[i] = vec
                    self._embed_cache[keys[i]] = tuple(vec.tolist())
        return [out[i] for i in range(len(texts))]


def fallback_embed(text: str, dimension: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Offline embedder: signed hashed bag of words, L2-normalized.

    Each token lands in bucket blake2b(token) % dimension with a sign from
    the digest's top bit. Degenerate inputs (no tokens, or full sign
    cancellation) map to the first basis vector so the norm contract holds.
    """
    vec = np.zeros(dimension, dtype=np.float64)
    tokens = normalize(text).split()
    for token in tokens:
        digest = hashlib.blake2b(
            token.encode("utf-8"), digest_size=8, person=EMBED_PERSON
        ).digest()
        h = int.from_bytes(digest, "big")
        sign = 1.0 if (h >> 63) & 1 else -1.0
        vec[h % dimension] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0:
        vec[0] = 1.0
        return vec
    return vec / norm


# --- response grammars ------------------------------------------------------

_HEADER_PREFIX = "## "


def _split_sections(raw: str) -> tuple[list[tuple[str, list[str]]], None]:
    """Split on `## NAME` header lines. Returns sections in document order."""
    sections: list[tuple[str, list[str]]] = []
    current: Optional[list[str]] = None
    for line in raw.splitlines():
        stripped = line.strip()
        if stripped.startswith(_HEADER_PREFIX):
            name = stripped[len(_HEADER_PREFIX) :].strip()
            sections.append((name, []))
            current = sections[-1][1]
        elif current is not None:
            current.append(line)
    return sections, None


def _section_map(raw: str) -> dict[str, list[str]]:
    sections, _ = _split_sections(raw)
    out: dict[str, list[str]] = {}
    for name, lines in sections:
        if name in out:
            raise ParseError(f"duplicate {name} section")
        out[name] = lines
    return out


def _extract_fence(lines: list[str], section: str) -> str:
    blocks: list[list[str]] = []
    in_fence = False
    current: list[str] = []
    for line in lines:
        stripped = line.strip()
        if not in_fence and stripped.startswith("```"):
            in_fence = True
            current = []
        elif in_fence and stripped == "```":
            in_fence = False
            blocks.append(current)
        elif in_fence:
            current.append(line)
    if in_fence:
        raise ParseError(f"unterminated fence in {section}")
    if not blocks:
        raise ParseError(f"missing fenced block in {section}")
    if len(blocks) > 1:
        raise ParseError(f"expected exactly one fenced block in {section}, found {len(blocks)}")
    body = "\n".join(blocks[0])
    if not body.strip():
        raise ParseError(f"empty {section} block")
    return body + "\n"


def _section_text(sections: dict[str, list[str]], name: str) -> str:
    if name not in sections:
        raise ParseError(f"missing {name} section")
    text = "\n".join(sections[name]).strip()
    if not text:
        raise ParseError(f"empty {name} section")
    return text


def _indexed_sections(sections: dict[str, list[str]], prefix: str) -> dict[int, str]:
    """Map candidate index -> actual header name for `SOLUTION k`-style
    sections, tolerating stray spacing but rejecting index collisions."""
    out: dict[int, str] = {}
    for name in sections:
        parts = name.split()
        if len(parts) == 2 and parts[0] == prefix and parts[1].isdigit():
            k = int(parts[1])
            if k in out:
                raise ParseError(f"duplicate {prefix} {k} section")
            out[k] = name
    return out


def _parse_candidate_sections(sections: dict[str, list[str]]) -> tuple[CandidatePair, ...]:
    solutions = _indexed_sections(sections, "SOLUTION")
    tests = _indexed_sections(sections, "TESTS")
    if sorted(solutions) != [1, 2, 3]:
        raise ParseError(f"expected 3 candidates, found {len(solutions)}")
    pairs = []
    for k in (1, 2, 3):
        if k not in tests:
            raise ParseError(f"missing TESTS {k} section")
        solution = _extract_fence(sections[solutions[k]], f"SOLUTION {k}")
        test_block = _extract_fence(sections[tests[k]], f"TESTS {k}")
        pairs.append(
            CandidatePair(index=k - 1, solution_source=solution, test_source=test_block)
        )
    return tuple(pairs)


def parse_structured(raw: str) -> ParsedStructuredOutput:
    """Parse a full structuring transcript.

    Grammar: `## INSTRUCTION`, `## REASONING`, then `## SOLUTION k` and
    `## TESTS k` for k = 1..3, each holding exactly one fenced code block.
    Raises ParseError naming the first violated rule; never crashes on
    arbitrary input.
    """
    sections = _section_map(raw)
    instruction = _section_text(sections, "INSTRUCTION")
    reasoning = _section_text(sections, "REASONING")
    candidates = _parse_candidate_sections(sections)
    return ParsedStructuredOutput(
        instruction_text=instruction,
        reasoning_text=reasoning,
        candidates=candidates,
    )


def parse_candidates(raw: str) -> tuple[CandidatePair, ...]:
    """Parse a coder reply for an already-fixed instruction: just the three
    SOLUTION/TESTS sections."""
    return _parse_candidate_sections(_section_map(raw))


@dataclass(frozen=True)
class OffspringParse:
    instruction_text: str
    reasoning_text: str
    parent_indices: tuple[int, ...]


def parse_offspring(raw: str, max_parent_index: int = 5) -> OffspringParse:
    """Parse an instructor reply: `## INSTRUCTION`, `## REASONING`, and
    `## PARENTS` with 1-based comma-separated indices of the few-shot
    examples that were merged. The PARENTS section is present in every
    instructor reply so transcripts stay operator-agnostic; mutation
    callers ignore it."""
    sections = _section_map(raw)
    instruction = _section_text(sections, "INSTRUCTION")
    reasoning = _section_text(sections, "REASONING")
    parents_text = _section_text(sections, "PARENTS")
    indices = []
    for piece in parents_text.replace(",", " ").split():
        if not piece.isdigit():
            raise ParseError(f"unparsable PARENTS entry {piece!r}")
        idx = int(piece)
        if not 1 <= idx <= max_parent_index:
            raise ParseError(f"PARENTS index {idx} out of range 1..{max_parent_index}")
        indices.append(idx)
    seen = []
    for idx in indices:
        if idx not in seen:
            seen.append(idx)
    return OffspringParse(
        instruction_text=instruction,
        reasoning_text=reasoning,
        parent_indices=tuple(seen),
    )


@dataclass(frozen=True)
class JudgeResult:
    passed: bool
    failed_checks: tuple[str, ...] = ()


JUDGE_CHECKS = ("structure", "clarity", "semantic_alignment", "functional_alignment")


def parse_judge_reply(raw: str) -> JudgeResult:
    """Strict judge grammar: `PASS`, or `FAIL: check[, check...]` drawing
    from the known check names. Anything else fails closed as a structure
    failure — an unreadable judgement must never admit a record."""
    text = raw.strip()
    if text == "PASS":
        return JudgeResult(passed=True)
    if text.startswith("FAIL:"):
        names = [p.strip() for p in text[len("FAIL:") :].split(",") if p.strip()]
        if names and all(n in JUDGE_CHECKS for n in names):
            return JudgeResult(passed=False, failed_checks=tuple(names))
    log.warning("judge reply outside grammar, failing closed: %r", raw[:120])
    return JudgeResult(passed=False, failed_checks=("structure",))


def parse_verifier_reply(raw: str) -> bool:
    """Duplicate-verifier grammar: `DUPLICATE` or `DISTINCT`. Unreadable
    replies fail open (DISTINCT): a noisy verifier must never delete data."""
    text = raw.strip()
    if text == "DUPLICATE":
        return True
    if text != "DISTINCT":
        log.warning("verifier reply outside grammar, keeping pair: %r", raw[:120])
    return False


# --- prompt templates -------------------------------------------------------

_PROMPTS_DIR = os.path.join(os.path.dirname(__file__), "prompts")

PROMPT_NAMES = (
    "system_instructor",
    "system_coder",
    "system_judge",
    "structure",
    "candidates",
    "crossover",
    "mutation_tighten_constraints",
    "mutation_deepen_reasoning",
    "mutation_expand_scope",
    "judge",
    "dedup_verify",
)


def load_prompt(name: str) -> str:
    if name not in PROMPT_NAMES:
        raise ValueError(f"unknown prompt template {name!r}")
    path = os.path.join(_PROMPTS_DIR, name + ".txt")
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def render_prompt(name: str, **values: str) -> str:
    return string.Template(load_prompt(name)).substitute(**values)


def prompt_checksums() -> dict[str, str]:
    """Template version fingerprints, recorded into run metadata."""
    return {name: canonical_id(load_prompt(name)) for name in PROMPT_NAMES}
