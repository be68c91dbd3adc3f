"""LLM planning: instruction prompts, the two-request chat protocol, plan extraction.

The conversation is:

1. instruction prompt (task, multishot examples, constraints, request for
   piece descriptions with their form) -> free-text reply;
2. follow-up asking for one JSON plan per piece -> reply with JSON;
3. optionally, corrective messages listing the violations of rejected
   plans, at most ``max_retries`` times.

Chat clients only need ``complete(messages) -> str``. :class:`ReplayChatClient`
serves recorded transcripts so tests and CI run offline.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Protocol, Sequence

from .form_plan import FormPlan, PlanConstraints, PlanError, parse_plan, validate_plan

log = logging.getLogger(__name__)

ENV_LLM_URL = "FORMAGEN_LLM_URL"
ENV_LLM_KEY = "FORMAGEN_LLM_KEY"
ROLES = ("system", "user", "assistant")
JSON_SKELETON = (
    '{ PART_NUMBER: ["PROMPT", LENGTH_IN_SECONDS, REFERENCED_PART], '
    'PART_NUMBER: ["PROMPT", LENGTH_IN_SECONDS, REFERENCED_PART], ... }'
)

TASK_TEXT = (
    "Assume you're a musician writing text prompts for a system that generates music "
    "from a short description of the music. You will design complete pieces with a clear "
    "musical form and write one prompt for every part of each piece."
)
EXAMPLES_HEADER = (
    "Below are example prompts that the system understands, together with the kind of "
    "music it produces:"
)
CONSTRAINTS_HEADER = (
    "You may go beyond these examples, but each piece must be coherent and have a sense of "
    "unity. First describe your thinking about the composition, then break it down into "
    "parts. Your prompts must satisfy these constraints:"
)
ITPRA_RULE = (
    "Shape the form with a framework of musical expectation such as the ITPRA theory "
    "(Imagination, Tension, Prediction, Reaction, Appraisal), and keep each piece within "
    "one coherent genre."
)
DEFAULT_RULES = (
    "The entire piece must be exactly {total_length_s} seconds long. You also decide the length of each part.",
    "The prompt for a part may reference one earlier part; the generator then continues from "
    "the end of that part.",
    'The generator cannot make a part with "a slower tempo" than an earlier part, so never ask '
    "for a slower tempo.",
    "Each prompt must describe the music of its part on its own, in the style of the examples.",
    "To repeat a part with variations, reference the original part and say in the new prompt "
    "what changed.",
)


class PlannerError(RuntimeError):
    pass


class TransportError(PlannerError):
    """The chat endpoint could not be reached or did not answer in time."""


class PlanExtractionError(PlannerError):
    pass


def default_examples() -> list[str]:
    text = resources.files("formagen").joinpath("data/example_descriptions.txt").read_text("utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def _fmt_seconds(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


@dataclass
class PlannerConfig:
    example_descriptions: list[str] = field(default_factory=default_examples)
    rule_texts: list[str] = field(default_factory=lambda: list(DEFAULT_RULES))
    use_itpra: bool = True
    pieces_requested: int = 10
    total_length_s: float = 150.0
    min_part_s: float = 5.0
    max_retries: int = 3
    brief: str = ""

    def __post_init__(self):
        if len(self.example_descriptions) < 1:
            raise ValueError("at least one example description is required")
        if self.pieces_requested < 1:
            raise ValueError("pieces_requested must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def constraints(self) -> PlanConstraints:
        return PlanConstraints(total_length_s=self.total_length_s, min_part_s=self.min_part_s)

    def rules(self) -> list[str]:
        rules = [r.format(total_length_s=_fmt_seconds(self.total_length_s)) for r in self.rule_texts]
        if self.use_itpra:
            rules.insert(min(1, len(rules)), ITPRA_RULE)
        return rules


# --------------------------------------------------------------------------- #
# prompts

def build_instruction_prompt(config: PlannerConfig) -> str:
    n = config.pieces_requested
    lines = [f"*Task* {TASK_TEXT}", "", f"*Multishot examples* {EXAMPLES_HEADER}"]
    lines += [f"- {json.dumps(desc, ensure_ascii=False)}" for desc in config.example_descriptions]
    lines += ["", f"*Constraints* {CONSTRAINTS_HEADER}"]
    lines += [f"{i}. {rule}" for i, rule in enumerate(config.rules(), start=1)]
    if config.brief.strip():
        lines += ["", f"*Brief* {config.brief.strip()}"]
    piece = "piece" if n == 1 else "pieces"
    lines += [
        "",
        f"*Request Part 1* Come up with {n} {piece}, including the form and a description of each part.",
    ]
    return "\n".join(lines)


def build_followup_prompt(config: PlannerConfig) -> str:
    n = config.pieces_requested
    total = _fmt_seconds(config.total_length_s)
    return "\n".join([
        f"*Request Part 2* Now provide the details of the parts for each piece ({n} expected) "
        "in JSON format, one JSON object per piece:",
        JSON_SKELETON,
        "PART_NUMBER starts at 1 and counts up. LENGTH_IN_SECONDS is a number. "
        "REFERENCED_PART is the number of an earlier part, or null when the part references nothing.",
        f"The lengths of the parts of each piece must add up to exactly {total} seconds.",
    ])


def build_correction_prompt(rejected: Sequence[tuple[str, list[str]]], config: PlannerConfig) -> str:
    lines = ["Some of the JSON plans break the constraints:"]
    for i, (_, violations) in enumerate(rejected, start=1):
        lines.append(f"Plan {i}: " + "; ".join(violations))
    lines.append(
        f"Send corrected JSON for these plans only, in the same format: {JSON_SKELETON}. "
        f"Each piece must be exactly {_fmt_seconds(config.total_length_s)} seconds long."
    )
    return "\n".join(lines)


# --------------------------------------------------------------------------- #
# extraction

def _is_plan_object(obj) -> bool:
    if not isinstance(obj, dict) or not obj:
        return False
    return all(isinstance(k, str) and k.strip().isdigit() for k in obj)


def extract_plan_json(reply: str) -> list[str]:
    """Every outermost JSON object in ``reply`` whose keys are all part numbers.

    Objects that do not qualify are searched for qualifying objects inside
    them. Code fences and prose around the objects are ignored.
    """
    decoder = json.JSONDecoder()
    found = []
    i = reply.find("{")
    while i != -1:
        try:
            obj, end = decoder.raw_decode(reply, i)
        except json.JSONDecodeError:
            end = None
        if end is not None and _is_plan_object(obj):
            found.append(reply[i:end])
            i = reply.find("{", end)
        else:
            i = reply.find("{", i + 1)
    if not found:
        raise PlanExtractionError("no plan JSON found")
    return found


# --------------------------------------------------------------------------- #
# transcripts and clients

@dataclass
class ChatTranscript:
    messages: list[tuple[str, str]] = field(default_factory=list)

    def add(self, role: str, content: str) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.messages.append((role, content))

    def as_messages(self) -> list[dict]:
        return [{"role": r, "content": c} for r, c in self.messages]

    def check(self) -> None:
        body = self.messages
        if body and body[0][0] == "system":
            body = body[1:]
        for i, (role, _) in enumerate(body):
            expected = "user" if i % 2 == 0 else "assistant"
            if role != expected:
                raise ValueError(f"message {i}: expected role {expected}, got {role}")

    def to_json(self) -> str:
        return json.dumps({"messages": self.as_messages()}, indent=2, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "ChatTranscript":
        data = json.loads(text)
        msgs = data["messages"] if isinstance(data, dict) else data
        t = cls()
        for m in msgs:
            t.add(m["role"], m["content"])
        return t


class ChatClient(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


class HTTPChatClient:
    """POSTs ``{model, messages}`` and reads ``{content}`` from the JSON reply."""

    def __init__(self, url: Optional[str] = None, api_key: Optional[str] = None,
                 model: str = "gpt-4", timeout_s: float = 120.0):
        self.url = url or os.environ.get(ENV_LLM_URL)
        if not self.url:
            raise PlannerError(f"no chat endpoint configured (set {ENV_LLM_URL})")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_LLM_KEY)
        self.model = model
        self.timeout_s = timeout_s

    def complete(self, messages: list[dict]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = json.dumps({"model": self.model, "messages": messages}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                data = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise TransportError(f"chat endpoint returned HTTP {exc.code}") from exc
        except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
            raise TransportError(f"chat endpoint unreachable: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise TransportError("chat endpoint returned non-JSON") from exc
        if not isinstance(data, dict) or not isinstance(data.get("content"), str):
            raise TransportError("chat reply has no 'content' string")
        return data["content"]


class ReplayChatClient:
    """Answers from a recorded transcript: the n-th user turn gets the n-th assistant reply.

    Stateless, so one instance can serve any number of sessions.
    """

    def __init__(self, transcript: ChatTranscript):
        self.replies = [c for r, c in transcript.messages if r == "assistant"]

    @classmethod
    def from_file(cls, path) -> "ReplayChatClient":
        with open(path, encoding="utf-8") as fh:
            return cls(ChatTranscript.from_json(fh.read()))

    def complete(self, messages: list[dict]) -> str:
        turn = sum(1 for m in messages if m["role"] == "user")
        if turn > len(self.replies):
            raise PlannerError(f"replay fixture has {len(self.replies)} replies; turn {turn} requested")
        return self.replies[turn - 1]


# --------------------------------------------------------------------------- #
# protocol

@dataclass
class PlannerResult:
    plans: list[FormPlan]
    raw_transcript: ChatTranscript
    rejected: list[tuple[str, list[str]]] = field(default_factory=list)
    retries_used: int = 0


def _ask(client, transcript: ChatTranscript, content: str, max_retries: int) -> str:
    transcript.add("user", content)
    for attempt in range(max_retries + 1):
        try:
            reply = client.complete(transcript.as_messages())
            break
        except TransportError as exc:
            log.warning("chat request failed (attempt %d/%d): %s", attempt + 1, max_retries + 1, exc)
            if attempt == max_retries:
                raise
    transcript.add("assistant", reply)
    return reply


def _collect(reply: str, constraints: PlanConstraints, description: str):
    good, bad = [], []
    try:
        candidates = extract_plan_json(reply)
    except PlanExtractionError as exc:
        return good, [(reply, [str(exc)])]
    for text in candidates:
        try:
            plan = parse_plan(text, description)
        except PlanError as exc:
            bad.append((text, [str(exc)]))
            continue
        violations = validate_plan(plan, constraints)
        if violations:
            bad.append((text, violations))
        else:
            good.append(plan)
    return good, bad


def request_plans(client, config: PlannerConfig) -> PlannerResult:
    """Run the two-request protocol and return every plan that validates."""
    constraints = config.constraints
    transcript = ChatTranscript()
    description = _ask(client, transcript, build_instruction_prompt(config), config.max_retries)
    reply = _ask(client, transcript, build_followup_prompt(config), config.max_retries)
    plans, pending = _collect(reply, constraints, description)
    rejected = list(pending)
    retries = 0
    while pending and retries < config.max_retries and len(plans) < config.pieces_requested:
        retries += 1
        reply = _ask(client, transcript, build_correction_prompt(pending, config), config.max_retries)
        fixed, pending = _collect(reply, constraints, description)
        plans += fixed
        rejected += pending
    if not plans:
        raise PlannerError(f"no valid plans after {retries} corrective retries")
    return PlannerResult(plans[: config.pieces_requested], transcript, rejected, retries)
