"""Song-form plans: parsing, validation, serialization and schedule compilation.

A plan is the JSON object an LLM writes for one piece::

    {"1": ["calm piano intro", 30, null], "2": ["strings join", 60, 1], ...}

Each value is ``[prompt, length_in_seconds, referenced_part]``. Compiling a
plan yields a :class:`ConditioningSchedule`: one :class:`ScheduleStep` per
token step, carrying the text-condition weights and the audio-prompt weight
the sampler should use at that step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

DEFAULT_TOTAL_S = 150.0
DEFAULT_MIN_PART_S = 5.0
TOTAL_TOLERANCE_S = 1e-9


class PlanError(ValueError):
    """Raised when plan text cannot be turned into a FormPlan."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"part {key!r}: {message}" if key is not None else message)


class ScheduleError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _fmt(x: float) -> str:
    """149.0 -> '149', 37.5 -> '37.5'."""
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


@dataclass(frozen=True)
class Part:
    index: int
    prompt: str
    length_s: float
    referenced_part: Optional[int] = None


@dataclass(frozen=True)
class FormPlan:
    parts: tuple[Part, ...]
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def total_length_s(self) -> float:
        return float(sum(p.length_s for p in self.parts))

    def part(self, index: int) -> Part:
        return self.parts[index - 1]


@dataclass(frozen=True)
class PlanConstraints:
    total_length_s: float = DEFAULT_TOTAL_S
    min_part_s: float = DEFAULT_MIN_PART_S
    max_part_s: Optional[float] = None  # None -> total_length_s

    def __post_init__(self):
        if self.max_part_s is None:
            object.__setattr__(self, "max_part_s", float(self.total_length_s))
        if not 0 < self.min_part_s <= self.max_part_s <= self.total_length_s:
            raise ValueError(
                "constraints need 0 < min_part_s <= max_part_s <= total_length_s, got "
                f"{self.min_part_s}, {self.max_part_s}, {self.total_length_s}"
            )


# --------------------------------------------------------------------------- #
# wire format

def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise PlanError("duplicate part number", key)
        out[key] = value
    return out


def parse_plan(json_text: str, description: str = "") -> FormPlan:
    """Parse one plan object. Parts come back ordered by part number.

    A ``null`` or ``0`` in the referenced-part slot means "no reference".
    Structural problems raise :class:`PlanError` naming the offending key;
    numeric constraints (lengths, totals) are left to :func:`validate_plan`.
    """
    if isinstance(json_text, bytes):
        json_text = json_text.decode("utf-8")
    try:
        obj = json.loads(json_text, object_pairs_hook=_reject_duplicates)
    except PlanError:
        raise
    except json.JSONDecodeError as exc:
        raise PlanError(f"malformed JSON: {exc.msg} at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(obj, dict):
        raise PlanError("plan must be a JSON object keyed by part number")
    if not obj:
        raise PlanError("plan has no parts")

    parts = {}
    for key, value in obj.items():
        try:
            index = int(key.strip())
        except ValueError:
            raise PlanError("part number is not an integer", key) from None
        if index < 1:
            raise PlanError("part numbers start at 1", key)
        if index in parts:
            raise PlanError("duplicate part number", key)
        if not isinstance(value, list) or len(value) != 3:
            raise PlanError("expected [PROMPT, LENGTH_IN_SECONDS, REFERENCED_PART]", key)
        prompt, length, ref = value
        if not isinstance(prompt, str) or not prompt.strip():
            raise PlanError("missing prompt", key)
        if isinstance(length, bool) or not isinstance(length, (int, float)) or not math.isfinite(length):
            raise PlanError(f"non-numeric length {length!r}", key)
        if ref is None or (not isinstance(ref, bool) and ref == 0):
            ref = None
        elif isinstance(ref, bool) or not isinstance(ref, (int, float)) or ref != int(ref):
            raise PlanError(f"referenced part {ref!r} is not a part number", key)
        else:
            ref = int(ref)
            if ref < 0:
                raise PlanError(f"referenced part {ref} is not a part number", key)
            if ref >= index:
                raise PlanError(f"forward reference to part {ref}", key)
        parts[index] = Part(index, prompt, float(length), ref)

    indices = sorted(parts)
    if indices != list(range(1, len(indices) + 1)):
        missing = sorted(set(range(1, indices[-1] + 1)) - set(indices))
        raise PlanError(f"part numbers must be contiguous from 1; missing {missing}")
    return FormPlan(tuple(parts[i] for i in indices), description)


def _json_number(x: float):
    x = float(x)
    return int(x) if x.is_integer() else x


def serialize_plan(plan: FormPlan) -> str:
    """Emit the wire format, one part per line, keys in ascending order."""
    lines = []
    for p in sorted(plan.parts, key=lambda p: p.index):
        value = [p.prompt, _json_number(p.length_s), p.referenced_part]
        lines.append(f"  {json.dumps(str(p.index))}: {json.dumps(value, ensure_ascii=False)}")
    return "{\n" + ",\n".join(lines) + "\n}"


# --------------------------------------------------------------------------- #
# validation

def validate_plan(plan: FormPlan, constraints: PlanConstraints = PlanConstraints()) -> list[str]:
    """Return human-readable violations; an empty list means the plan is usable."""
    violations = []
    for position, p in enumerate(plan.parts, start=1):
        if p.index != position:
            violations.append(f"part {p.index}: expected part number {position} (numbers must be contiguous from 1)")
        if not p.prompt or not p.prompt.strip():
            violations.append(f"part {p.index}: empty prompt")
        if not p.length_s > 0:
            violations.append(f"part {p.index}: non-positive length")
        elif p.length_s < constraints.min_part_s:
            violations.append(
                f"part {p.index}: length {_fmt(p.length_s)} below minimum {_fmt(constraints.min_part_s)}"
            )
        elif p.length_s > constraints.max_part_s:
            violations.append(
                f"part {p.index}: length {_fmt(p.length_s)} above maximum {_fmt(constraints.max_part_s)}"
            )
        if p.referenced_part is not None and not 1 <= p.referenced_part < p.index:
            violations.append(f"part {p.index}: reference to part {p.referenced_part} is not an earlier part")
    total = plan.total_length_s
    if abs(total - constraints.total_length_s) > TOTAL_TOLERANCE_S:
        violations.append(f"total length {_fmt(total)} ≠ {_fmt(constraints.total_length_s)}")
    return violations


# --------------------------------------------------------------------------- #
# schedule

@dataclass(frozen=True)
class ScheduleStep:
    part: int
    text_conditions: tuple[tuple[int, float], ...]
    audio_prompt: Optional[tuple[int, float]] = None  # (source part, weight)


@dataclass(frozen=True)
class AudioPromptRequest:
    """Part ``part`` is primed with the last ``length_steps`` tokens of ``source_part``."""

    part: int
    source_part: int
    length_s: float
    length_steps: int
    fade_start: int
    fade_steps: int


@dataclass(frozen=True)
class ConditioningSchedule:
    frame_rate: float
    steps: tuple[ScheduleStep, ...]
    prompts: dict[int, str] = field(default_factory=dict)
    part_spans: dict[int, tuple[int, int]] = field(default_factory=dict)
    audio_requests: tuple[AudioPromptRequest, ...] = ()

    def __len__(self):
        return len(self.steps)

    @property
    def duration_s(self) -> float:
        return len(self.steps) / self.frame_rate

    def weights(self, condition: int):
        """Trajectory of one text condition's weight over all steps."""
        return [dict(s.text_conditions).get(condition, 0.0) for s in self.steps]


def ramp_weight(step: int, window_start: int, window_len: int) -> float:
    """Linear 1 -> 0 ramp: 1 at ``window_start``, 0 at ``window_start + window_len``."""
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    if step <= window_start:
        return 1.0
    if step >= window_start + window_len:
        return 0.0
    return 1.0 - (step - window_start) / window_len


def part_step_counts(plan: FormPlan, frame_rate: float) -> list[int]:
    """Steps per part: each part rounded half-up, the last absorbs the residual."""
    total_steps = round_half_up(plan.total_length_s * frame_rate)
    counts = [round_half_up(p.length_s * frame_rate) for p in plan.parts[:-1]]
    counts.append(total_steps - sum(counts))
    if counts[-1] < 1:
        raise ScheduleError("final part has no steps after rounding")
    return counts


def compile_schedule(
    plan: FormPlan,
    frame_rate: float = 10.0,
    transition_s: float = 5.0,
    audio_prompt_s: float = 15.0,
    audio_fade_s: float = 10.0,
) -> ConditioningSchedule:
    """Turn a plan into per-step conditioning weights.

    Each boundary blends over the last ``transition_s`` of the outgoing part,
    so the schedule lasts exactly the plan total. A part with a reference is
    primed with ``audio_prompt_s`` of the referenced part; that channel's
    weight ramps 1 -> 0 over ``audio_fade_s`` from the part start.
    """
    if not frame_rate > 0:
        raise ScheduleError(f"frame_rate must be positive, got {frame_rate}")
    if transition_s < 0 or audio_prompt_s < 0 or audio_fade_s < 0:
        raise ScheduleError("durations must be non-negative")
    if not plan.parts:
        raise ScheduleError("plan has no parts")
    shortest = min(p.length_s for p in plan.parts)
    if len(plan.parts) > 1 and transition_s > shortest:
        raise ScheduleError(f"transition_s {_fmt(transition_s)} is longer than the shortest part ({_fmt(shortest)} s)")

    counts = part_step_counts(plan, frame_rate)
    starts = [0]
    for c in counts[:-1]:
        starts.append(starts[-1] + c)
    spans = {p.index: (s, s + c) for p, s, c in zip(plan.parts, starts, counts)}
    trans_steps = round_half_up(transition_s * frame_rate)
    for p, c in zip(plan.parts[:-1], counts[:-1]):
        if trans_steps > c:
            raise ScheduleError(f"transition window of {trans_steps} steps exceeds part {p.index} ({c} steps)")

    steps: list[ScheduleStep] = []
    requests = []
    for k, p in enumerate(plan.parts):
        start, stop = spans[p.index]
        nxt = plan.parts[k + 1].index if k + 1 < len(plan.parts) else None
        window_start = stop - trans_steps

        audio = None
        if p.referenced_part is not None:
            src_start, src_stop = spans[p.referenced_part]
            length_steps = min(round_half_up(audio_prompt_s * frame_rate), src_stop - src_start)
            fade_steps = round_half_up(audio_fade_s * frame_rate)
            if length_steps > 0 and fade_steps > 0:
                audio = (p.referenced_part, start, fade_steps)
                requests.append(
                    AudioPromptRequest(
                        part=p.index,
                        source_part=p.referenced_part,
                        length_s=length_steps / frame_rate,
                        length_steps=length_steps,
                        fade_start=start,
                        fade_steps=fade_steps,
                    )
                )

        for i in range(start, stop):
            if nxt is not None and trans_steps > 0 and i >= window_start:
                w_out = ramp_weight(i, window_start, trans_steps)
                text = ((p.index, w_out), (nxt, 1.0 - w_out))
            else:
                text = ((p.index, 1.0),)
            audio_prompt = None
            if audio is not None:
                w_a = ramp_weight(i, audio[1], audio[2])
                if w_a > 0:
                    audio_prompt = (audio[0], w_a)
            steps.append(ScheduleStep(p.index, text, audio_prompt))

    return ConditioningSchedule(
        frame_rate=float(frame_rate),
        steps=tuple(steps),
        prompts={p.index: p.prompt for p in plan.parts},
        part_spans=spans,
        audio_requests=tuple(requests),
    )
