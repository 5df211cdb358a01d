"""Few-shot completion baseline: prompt construction, total response parsing,
and reconciliation into a valid scene.

The prompt shows four worked demonstrations (one per arrangement style,
never naming any), then the query scene's starting arrangement, and asks for
the finished arrangement as ``Box k: item, item`` lines.  Whatever text
comes back, parsing and reconciliation are total: recognized mentions place
objects, everything else lands deterministically, and the predicted state
always validates.

The completion service itself sits behind the ``CompletionClient`` contract;
tests use the deterministic stubs, and an HTTP client with environment-based
credentials, timeout, retries, and an audit log talks to a real endpoint.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .dataset import ScenePair
from .groupings import SchemaId
from .scene import ReceptacleId, SceneState, move_object


class LLMError(Exception):
    pass


class MissingSchemaDemo(LLMError):
    pass


class TransportError(LLMError):
    pass


# ---------------------------------------------------------------------------
# Scene transcripts and prompts
# ---------------------------------------------------------------------------

def render_scene(state: SceneState) -> str:
    """Deterministic transcript: one line per box (1-based) then the table."""
    lines = []
    for k in range(state.n_containers):
        contents = [o.category for o in state.container_objects(k) if not o.is_null]
        lines.append(f"Box {k + 1}: " + (", ".join(contents) if contents else "empty"))
    table = [o.category for o in state.surface_objects() if not o.is_null]
    lines.append("Table: " + (", ".join(table) if table else "empty"))
    return "\n".join(lines)


_INSTRUCTION = (
    "Move every object from the table into a box so the arrangement finishes "
    "the same way the examples do. Answer with one line per box in the form "
    "'Box k: item, item, ...' and write 'empty' for an empty box."
)


@dataclass(frozen=True)
class PromptBundle:
    demonstrations: tuple[str, str, str, str]
    query: str
    rendered: str


def build_prompt(demos: Sequence[ScenePair], query: SceneState) -> PromptBundle:
    """Four demonstrations (one per arrangement style, order fixed by the
    style's canonical order) followed by the query's starting arrangement."""
    by_schema = {}
    for demo in demos:
        if demo.schema in by_schema:
            raise MissingSchemaDemo(f"duplicate demonstration for {demo.schema.label}")
        by_schema[demo.schema] = demo
    missing = [s.label for s in SchemaId if s not in by_schema]
    if missing:
        raise MissingSchemaDemo(f"missing demonstrations: {', '.join(missing)}")

    demo_texts = []
    for i, schema in enumerate(SchemaId):
        demo = by_schema[schema]
        demo_texts.append(
            f"Example {i + 1} start:\n{render_scene(demo.initial)}\n"
            f"Example {i + 1} finished:\n{render_scene(demo.goal)}"
        )
    query_text = render_scene(query)
    rendered = (
        "Objects are being tidied from a table into numbered boxes. "
        "Each example shows a starting arrangement and the finished arrangement.\n\n"
        + "\n\n".join(demo_texts)
        + f"\n\nTask start:\n{query_text}\n\n{_INSTRUCTION}\n"
    )
    return PromptBundle(
        demonstrations=tuple(demo_texts),
        query=query_text,
        rendered=rendered,
    )


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParsedArrangement:
    """Per-container positive (category, count) lists plus unparsed text."""

    placements: dict[int, list[tuple[str, int]]]
    remainder: str

    def count(self, container: int, category: str) -> int:
        return sum(c for cat, c in self.placements.get(container, []) if cat == category)


_BOX_LINE = re.compile(r"^\s*(?:[-*]\s*)?box\s+(\d+)\s*[:\-]\s*(.*)$", re.IGNORECASE)


def _normalize(mention: str) -> str:
    return re.sub(r"[\s\-]+", "_", mention.strip().lower())


def _match_category(mention: str, vocabulary: dict[str, str]) -> str | None:
    """Case-insensitive, singular/plural tolerant match into the scene's
    categories; None when nothing fits."""
    norm = _normalize(mention)
    if not norm:
        return None
    candidates = [norm]
    if norm.endswith("es"):
        candidates.append(norm[:-2])
    if norm.endswith("s"):
        candidates.append(norm[:-1])
    candidates.extend([norm + "s", norm + "es"])
    for form in candidates:
        if form in vocabulary:
            return vocabulary[form]
    return None


def parse_response(text: str, query: SceneState) -> ParsedArrangement:
    """Total parser for ``Box k: ...`` lines; never raises.

    Mentions that match no scene category, lines that match no box pattern,
    and out-of-range box numbers all end up in the remainder.
    """
    vocabulary = {_normalize(o.category): o.category for o in query.non_null()}
    placements: dict[int, list[tuple[str, int]]] = {}
    leftovers: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        match = _BOX_LINE.match(line)
        if match is None:
            leftovers.append(line.strip())
            continue
        box = int(match.group(1)) - 1
        if not 0 <= box < query.n_containers:
            leftovers.append(line.strip())
            continue
        counts: dict[str, int] = {}
        for mention in re.split(r"[,;]", match.group(2)):
            mention = mention.strip()
            if not mention or _normalize(mention) in ("empty", "nothing", "none"):
                continue
            category = _match_category(mention, vocabulary)
            if category is None:
                leftovers.append(mention)
            else:
                counts[category] = counts.get(category, 0) + 1
        if counts:
            placements.setdefault(box, []).extend(sorted(counts.items()))
    return ParsedArrangement(placements=placements, remainder="\n".join(leftovers))


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

class CompletionClient(Protocol):
    def complete(self, prompt: str) -> str:
        """Return completion text for the prompt, or raise TransportError."""


@dataclass(frozen=True)
class CannedClient:
    """Always returns the same canned transcript; deterministic."""

    text: str

    def complete(self, prompt: str) -> str:
        return self.text


@dataclass(frozen=True)
class EmptyClient:
    """Returns an empty completion, exercising the reconciliation fallback."""

    def complete(self, prompt: str) -> str:
        return ""


class OracleClient:
    """Answers with the true goal transcript for the queried scene; the
    hermetic stand-in for a perfect model."""

    def __init__(self, pairs: Sequence[ScenePair]):
        self._answers = {
            render_scene(pair.initial): render_scene(pair.goal) for pair in pairs
        }

    def complete(self, prompt: str) -> str:
        marker = "Task start:\n"
        start = prompt.rfind(marker)
        if start < 0:
            raise TransportError("prompt lacks a task section")
        body = prompt[start + len(marker):].split("\n\n", 1)[0]
        answer = self._answers.get(body)
        if answer is None:
            raise TransportError("query scene not known to the oracle stub")
        return answer


class HTTPClient:
    """JSON-over-HTTP completion client with retry/backoff and an audit log.

    The credential is read from ``api_key_env`` at call time and sent as a
    bearer token; requests and responses append to ``audit_path`` as JSON
    lines.  ``min_interval`` caps the request rate.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key_env: str = "CONSOR_COMPLETION_API_KEY",
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 2.0,
        max_tokens: int = 256,
        min_interval: float = 0.0,
        audit_path: Path | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_tokens = max_tokens
        self.min_interval = min_interval
        self.audit_path = Path(audit_path) if audit_path else None
        self._last_request = 0.0

    def _audit(self, entry: dict) -> None:
        if self.audit_path is None:
            return
        entry = {"time": time.time(), **entry}
        with open(self.audit_path, "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {"model": self.model, "prompt": prompt, "max_tokens": self.max_tokens}

        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            wait = self._last_request + self.min_interval - time.time()
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.time()
            try:
                response = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                if response.status_code >= 500:
                    raise TransportError(f"server error {response.status_code}")
                response.raise_for_status()
                doc = response.json()
                text = doc.get("completion")
                if text is None:
                    choices = doc.get("choices") or []
                    text = choices[0].get("text", "") if choices else ""
                self._audit({"prompt": prompt, "response": text})
                return text
            except Exception as exc:  # noqa: BLE001 — every failure retries
                last_error = exc
                self._audit({"prompt": prompt, "error": str(exc)})
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise TransportError(f"completion request failed after {self.max_retries} attempts") \
            from last_error


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict_llm(
    initial: SceneState,
    demos: Sequence[ScenePair],
    client: CompletionClient,
) -> SceneState:
    """Prompt, parse, and reconcile into a valid predicted goal state.

    Prearranged objects stay put and consume their own mentions first; each
    Surface object then goes to the lowest-index container with a remaining
    mention of its category, or container 0 when no mention is left.
    """
    bundle = build_prompt(demos, initial)
    completion = client.complete(bundle.rendered)
    parsed = parse_response(completion, initial)

    remaining: dict[tuple[int, str], int] = {}
    for container, entries in parsed.placements.items():
        for category, count in entries:
            key = (container, category)
            remaining[key] = remaining.get(key, 0) + count
    for o in initial.non_null():
        if not o.receptacle.is_surface:
            key = (o.receptacle.index, o.category)
            if remaining.get(key, 0) > 0:
                remaining[key] -= 1

    state = initial
    for o in initial.surface_objects():
        if o.is_null:
            continue
        dest = 0
        for k in range(initial.n_containers):
            if remaining.get((k, o.category), 0) > 0:
                remaining[(k, o.category)] -= 1
                dest = k
                break
        state = move_object(state, o.category, o.instance_index, ReceptacleId.container(dest))
    return state
