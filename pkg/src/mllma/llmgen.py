"""Network-backed feature generator with record/replay cassettes.

Implements the same callable protocol as the offline mock: request in,
response out. Exchanges go to any chat-completion-style endpoint; raw
responses pass through strict DSL parsing before anything reaches the
evolution loop, and every exchange can be recorded to a cassette for
byte-identical offline replay.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

from .featdsl import (
    GRID_OPS,
    MAX_DEPTH,
    MAX_NODES,
    REDUCERS,
    SCALAR_OPS,
    SOURCES,
    DslError,
    parse_expr,
    to_string,
)
from .evolve import Candidate, GeneratorRequest, GeneratorResponse, Role

logger = logging.getLogger(__name__)

BASE_URL_ENV = "MLLMA_LLM_BASE_URL"
MODEL_ENV = "MLLMA_LLM_MODEL"
API_KEY_ENV = "MLLMA_LLM_API_KEY"

PROMPTS_VERSION = "prompts v1"


class TransportMode(str, enum.Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"


@dataclass(frozen=True)
class LlmConfig:
    base_url: str = ""
    model: str = ""
    api_key_env: str = API_KEY_ENV
    timeout: float = 30.0
    retry_budget: int = 3
    temperature: float = 0.7
    mode: TransportMode = TransportMode.LIVE
    cassette: str | None = None

    def __post_init__(self):
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")
        if self.mode is TransportMode.REPLAY and not self.cassette:
            raise ValueError("replay mode requires a cassette path")
        if self.mode is TransportMode.RECORD and not self.cassette:
            raise ValueError("record mode requires a cassette path")

    @classmethod
    def from_env(cls, **overrides) -> "LlmConfig":
        overrides.setdefault("base_url", os.environ.get(BASE_URL_ENV, ""))
        overrides.setdefault("model", os.environ.get(MODEL_ENV, ""))
        return cls(**overrides)


# ---------------------------------------------------------------------------
# Prompts

def _grammar_text() -> str:
    def ops(table):
        parts = []
        for op, (param, arity) in sorted(table.items()):
            sig = f"({op}"
            if param is not None:
                sig += " <number>"
            sig += " <expr>" * arity + ")"
            parts.append(sig)
        return " ".join(parts)

    return (
        f"Sources: {', '.join(SOURCES)} (each a 2-D raster).\n"
        f"Grid ops: {ops(GRID_OPS)}\n"
        f"Reducers (grid -> scalar): {ops(REDUCERS)}\n"
        f"Scalar ops: {ops(SCALAR_OPS)}\n"
        f"A feature is one S-expression reducing to a scalar, "
        f"at most {MAX_NODES} nodes and depth {MAX_DEPTH}."
    )


_SYSTEM = (
    "You design scalar image features for chip-layout congestion analysis. "
    "You answer only in the exact format requested; no prose outside the "
    "fenced block.\n" + _grammar_text()
)

_CONTRACT = (
    "Emit exactly {n} candidates inside one ``` fenced block. Each candidate "
    "is three lines:\n"
    "name: <lower_snake_case identifier>\n"
    "expr: <one DSL S-expression>\n"
    "desc: <one-line description of what it measures>\n"
    "No other text inside the block."
)


def _spec_lines(specs) -> str:
    return "\n".join(
        f"- {s.name}: {to_string(s.expr)}  ({s.description})" for s in specs
    )


def _digest_lines(digests) -> str:
    if not digests:
        return "(no sample digests supplied)"
    rows = []
    for i, d in enumerate(digests):
        head = " ".join(f"{v:.4g}" for v in d[:12])
        rows.append(f"sample {i}: {head}")
    return "\n".join(rows)


def build_messages(request: GeneratorRequest) -> list[dict]:
    """Role-specific chat messages; the parser is the real contract."""
    if request.role is Role.DEDUP_JUDGE:
        cand = _spec_lines(request.parents)
        pool = _spec_lines(request.pool)
        user = (
            "Existing feature pool:\n" + pool + "\n\n"
            "Candidates under review:\n" + cand + "\n\n"
            "For each candidate, answer on its own line, outside any fence:\n"
            "<candidate name>: KEEP <why it is distinct> | DROP <which pool "
            "entry it duplicates and why>"
        )
    elif request.role is Role.MUTATOR:
        user = (
            "Mutate the following parent features. Change exactly one node "
            "per candidate (an operator, a parameter, or a source) and keep "
            "the rest of the tree intact.\n\n"
            "Parents:\n" + _spec_lines(request.parents) + "\n\n"
            "Pooled raster statistics of a few training samples:\n"
            + _digest_lines(request.context_digests) + "\n\n"
            + _CONTRACT.format(n=request.n_candidates)
        )
    else:
        user = (
            "Recombine subtrees of the following features into new hybrid "
            "features. Each candidate must graft a subtree of one parent "
            "into another parent.\n\n"
            "Parents:\n" + _spec_lines(request.parents) + "\n\n"
            "Wider pool for context:\n" + _spec_lines(request.pool[:10]) + "\n\n"
            "Pooled raster statistics of a few training samples:\n"
            + _digest_lines(request.context_digests) + "\n\n"
            + _CONTRACT.format(n=request.n_candidates)
        )
    return [
        {"role": "system", "content": _SYSTEM},
        {"role": "user", "content": user},
    ]


def payload_for(request: GeneratorRequest, cfg: LlmConfig) -> dict:
    return {
        "model": cfg.model,
        "temperature": cfg.temperature,
        "seed": request.seed,
        "messages": build_messages(request),
    }


def request_key(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Transport

class TransportFailure(Exception):
    """Carries a retryability flag and a short reason."""

    def __init__(self, reason: str, retryable: bool):
        super().__init__(reason)
        self.reason = reason
        self.retryable = retryable


def urllib_transport(url: str, body: bytes, headers: dict,
                     timeout: float) -> tuple[int, str]:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read().decode("utf-8", "replace")
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read().decode("utf-8", "replace")
    except TimeoutError as exc:
        raise TransportFailure(f"timeout after {timeout}s", retryable=True) from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, TimeoutError):
            raise TransportFailure(f"timeout after {timeout}s", retryable=True) from exc
        raise TransportFailure(f"connection failed: {exc.reason}",
                               retryable=True) from exc


# ---------------------------------------------------------------------------
# Cassettes: line-oriented JSON, one exchange per line

_cassette_lock = threading.Lock()


def append_cassette(path: str | Path, record: dict) -> None:
    line = json.dumps(record, sort_keys=True, separators=(",", ":"))
    with _cassette_lock:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def load_cassette(path: str | Path) -> dict[str, dict]:
    """Last recorded exchange per request key."""
    records: dict[str, dict] = {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"cassette not found: {path}")
    for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{ln}: bad cassette line: {exc}") from exc
        records[rec["key"]] = rec
    return records


# ---------------------------------------------------------------------------
# Response parsing

_FENCE_RE = re.compile(r"```(?:[a-zA-Z0-9_-]*\n)?(.*?)```", re.DOTALL)
_NAME_OK = re.compile(r"[a-z][a-z0-9_]*$")


def _fenced(text: str) -> str:
    blocks = _FENCE_RE.findall(text)
    return "\n".join(blocks) if blocks else text


def _sanitize_name(raw: str, role: Role, round_index: int, i: int) -> str:
    cleaned = re.sub(r"[^a-z0-9_]", "_", raw.strip().lower())
    cleaned = cleaned.strip("_")
    if cleaned and _NAME_OK.match(cleaned):
        return cleaned
    tag = "m" if role is Role.MUTATOR else "x"
    return f"llm_{tag}{round_index}_{i}"


def parse_candidates(text: str, role: Role,
                     round_index: int) -> tuple[list[Candidate], list[str]]:
    """Accepts name/expr/desc stanzas or bare `(expr)` + `desc:` pairs."""
    candidates: list[Candidate] = []
    dropped: list[str] = []
    name: str | None = None
    expr_text: str | None = None

    def flush(desc: str):
        nonlocal name, expr_text
        if expr_text is None:
            return
        idx = len(candidates) + len(dropped)
        label = _sanitize_name(name or "", role, round_index, idx)
        try:
            parse_expr(expr_text)
        except DslError as exc:
            dropped.append(f"{label}: {exc}")
        else:
            candidates.append(Candidate(label, desc or f"Generated feature {label}.",
                                        expr_text.strip()))
        name = None
        expr_text = None

    for line in _fenced(text).splitlines():
        line = line.strip()
        if not line:
            continue
        low = line.lower()
        if low.startswith("name:"):
            if expr_text is not None:
                flush("")      # previous stanza had no desc line
            name = line[5:].strip()
        elif low.startswith("expr:"):
            expr_text = line[5:].strip()
        elif low.startswith("desc:"):
            flush(line[5:].strip())
        elif line.startswith("("):
            # bare expression line; description expected on the next desc:
            expr_text = line
    if expr_text is not None:
        flush("")
    return candidates, dropped


_VERDICT_RE = re.compile(
    r"^\s*[-*]?\s*(?P<name>[a-z][a-z0-9_]*)\s*:\s*(?P<verdict>keep|drop)\b\s*(?P<reason>.*)$",
    re.IGNORECASE,
)


def parse_verdicts(text: str, names: list[str]) -> list[tuple[str, bool, str]] | None:
    """None when nothing in the payload looks like a verdict."""
    found: dict[str, tuple[bool, str]] = {}
    for line in text.splitlines():
        m = _VERDICT_RE.match(line)
        if m and m.group("name") in names:
            keep = m.group("verdict").lower() == "keep"
            found[m.group("name")] = (keep, m.group("reason").strip())
    if not found:
        return None
    return [
        (n, *found.get(n, (True, "no verdict returned; kept")))
        for n in names
    ]


def _extract_content(body: str) -> str:
    try:
        obj = json.loads(body)
        return obj["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError):
        return body


# ---------------------------------------------------------------------------
# The generator

def _exchange(payload: dict, cfg: LlmConfig, transport) -> tuple[str | None, str | None]:
    """Returns (content, error); exactly one is set."""
    key = request_key(payload)
    if cfg.mode is TransportMode.REPLAY:
        rec = load_cassette(cfg.cassette).get(key)
        if rec is None:
            return None, f"cassette has no record for request {key[:12]}"
        if rec.get("error"):
            return None, rec["error"]
        status, body = rec["status"], rec["response"]
    else:
        api_key = os.environ.get(cfg.api_key_env, "")
        if not api_key:
            return None, f"auth failure: {cfg.api_key_env} is unset"
        headers = {
            "Content-Type": "application/json",
            "Authorization": f"Bearer {api_key}",
        }
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        body_bytes = json.dumps(payload).encode("utf-8")
        attempts = max(1, cfg.retry_budget)
        status, body, error = 0, "", None
        for attempt in range(attempts):
            try:
                status, body = transport(url, body_bytes, headers, cfg.timeout)
            except TransportFailure as exc:
                error = exc.reason
                if not exc.retryable:
                    break
                continue
            error = None
            if status in (401, 403):
                error = f"auth failure (HTTP {status})"
                break
            if status >= 500:
                error = f"HTTP {status}"
                continue
            if status != 200:
                error = f"HTTP {status}"
                break
            break
        if cfg.mode is TransportMode.RECORD:
            append_cassette(cfg.cassette, {
                "key": key, "request": payload, "status": status,
                "response": body, "error": error,
            })
        if error is not None:
            suffix = "; retries exhausted" if status >= 500 or "timeout" in error else ""
            return None, error + suffix
    return _extract_content(body), None


def generate(request: GeneratorRequest, cfg: LlmConfig,
             transport=urllib_transport) -> GeneratorResponse:
    """All three roles over HTTP, with validation and record/replay."""
    payload = payload_for(request, cfg)
    content, error = _exchange(payload, cfg, transport)
    if error is not None:
        return GeneratorResponse(error=error)
    if request.role is Role.DEDUP_JUDGE:
        names = [s.name for s in request.parents]
        verdicts = parse_verdicts(content, names)
        if verdicts is None:
            logger.warning("judge payload unparseable; keeping all %d candidates",
                           len(names))
            verdicts = [(n, True, "verdict unparseable; kept") for n in names]
        return GeneratorResponse(verdicts=verdicts)
    candidates, dropped = parse_candidates(content, request.role,
                                           request.round_index)
    for reason in dropped:
        logger.info("dropped candidate: %s", reason)
    if not candidates and dropped:
        return GeneratorResponse(error=f"empty after validation: {dropped[0]}")
    return GeneratorResponse(candidates=candidates)


def judge_duplicates(request: GeneratorRequest, cfg: LlmConfig,
                     transport=urllib_transport) -> GeneratorResponse:
    if request.role is not Role.DEDUP_JUDGE:
        raise ValueError("judge_duplicates requires a dedup-judge request")
    return generate(request, cfg, transport)


def make_generator(cfg: LlmConfig, transport=urllib_transport):
    """Callable with the evolve generator signature."""
    def _gen(request: GeneratorRequest) -> GeneratorResponse:
        return generate(request, cfg, transport)
    return _gen
