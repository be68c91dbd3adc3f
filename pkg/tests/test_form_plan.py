import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from formagen.form_plan import (
    FormPlan,
    Part,
    PlanConstraints,
    PlanError,
    ScheduleError,
    compile_schedule,
    parse_plan,
    part_step_counts,
    round_half_up,
    serialize_plan,
    validate_plan,
)
from oracles import ramp

ABA = '{"1": ["calm piano intro", 30, null], "2": ["strings join, same motif", 60, 1], "3": ["piano outro, variation of intro", 60, 1]}'


def test_parse_three_part_plan():
    plan = parse_plan(ABA)
    assert [p.index for p in plan.parts] == [1, 2, 3]
    assert [p.referenced_part for p in plan.parts] == [None, 1, 1]
    assert plan.total_length_s == 150


def test_parse_orders_by_part_number():
    plan = parse_plan('{"2": ["b", 75, 1], "1": ["a", 75, null]}')
    assert [p.prompt for p in plan.parts] == ["a", "b"]


def test_parse_single_part():
    plan = parse_plan('{"1": ["solo drone", 150, null]}')
    assert plan.parts == (Part(1, "solo drone", 150.0, None),)


def test_forward_reference_rejected():
    with pytest.raises(PlanError, match="forward reference") as info:
        parse_plan('{"1": ["intro", 60, 2], "2": ["outro", 90, null]}')
    assert info.value.key == "1"


@pytest.mark.parametrize(
    "text, key, message",
    [
        ('{"1": ["a", 150, null]', None, "malformed JSON"),
        ('{"1": ["a", "long", null]}', "1", "non-numeric length"),
        ('{"1": ["a", 75, null], "2": [null, 75, null]}', "2", "missing prompt"),
        ('{"1": ["a", 75, null], "1": ["b", 75, null]}', "1", "duplicate part number"),
        ('{"x": ["a", 150, null]}', "x", "not an integer"),
        ('{"1": ["a", true, null]}', "1", "non-numeric length"),
    ],
)
def test_parse_errors_name_the_key(text, key, message):
    with pytest.raises(PlanError, match=message) as info:
        parse_plan(text)
    assert info.value.key == key


def test_zero_and_null_reference_both_mean_none():
    plan = parse_plan('{"1": ["a", 75, 0], "2": ["b", 75, null]}')
    assert all(p.referenced_part is None for p in plan.parts)


def test_validate_ok():
    assert validate_plan(parse_plan(ABA), PlanConstraints()) == []


def test_validate_off_by_one_total():
    plan = parse_plan('{"1": ["a", 74, null], "2": ["b", 75, null]}')
    assert validate_plan(plan, PlanConstraints()) == ["total length 149 ≠ 150"]


def test_validate_zero_length_part():
    plan = parse_plan('{"1": ["a", 150, null], "2": ["b", 0, null]}')
    assert validate_plan(plan, PlanConstraints()) == ["part 2: non-positive length"]


def test_validate_catches_bad_reference_built_directly():
    plan = FormPlan((Part(1, "a", 75, None), Part(2, "b", 75, 2)))
    assert validate_plan(plan) == ["part 2: reference to part 2 is not an earlier part"]


def test_constraints_invariant():
    with pytest.raises(ValueError):
        PlanConstraints(total_length_s=100, min_part_s=50, max_part_s=40)
    assert PlanConstraints(total_length_s=90).max_part_s == 90


def test_serialize_ascending_keys_and_null():
    text = serialize_plan(parse_plan('{"2": ["b", 75, 1], "1": ["a", 75, 0]}'))
    assert list(json.loads(text)) == ["1", "2"]
    assert json.loads(text)["1"] == ["a", 75, None]


# --- schedules ------------------------------------------------------------

def two_part(a=75, b=75):
    return parse_plan(json.dumps({"1": ["first", a, None], "2": ["second", b, None]}))


def test_single_part_schedule_has_weight_one_everywhere():
    sched = compile_schedule(parse_plan('{"1": ["solo drone", 150, null]}'), 10, transition_s=5)
    assert len(sched) == 1500
    assert all(s.text_conditions == ((1, 1.0),) for s in sched.steps)


def test_two_part_blend_window_matches_closed_form_ramp():
    sched = compile_schedule(two_part(), frame_rate=10, transition_s=5)
    blended = [i for i, s in enumerate(sched.steps) if len(s.text_conditions) == 2]
    assert blended == list(range(700, 750))
    for i in blended:
        (c1, w1), (c2, w2) = sched.steps[i].text_conditions
        assert (c1, c2) == (1, 2)
        assert w1 == pytest.approx(ramp(i, 700, 50), abs=1e-12)
        assert w2 == pytest.approx(1 - ramp(i, 700, 50), abs=1e-12)
    assert dict(sched.steps[725].text_conditions) == {1: 0.5, 2: 0.5}
    assert sched.steps[750].text_conditions == ((2, 1.0),)


def test_audio_prompt_for_referencing_part():
    plan = parse_plan(ABA)
    sched = compile_schedule(plan, frame_rate=10, transition_s=5, audio_prompt_s=15, audio_fade_s=10)
    (req2, req3) = sched.audio_requests
    assert (req3.part, req3.source_part, req3.length_s, req3.length_steps) == (3, 1, 15.0, 150)
    start3 = sched.part_spans[3][0]
    assert start3 == 900
    weights = [sched.steps[start3 + k].audio_prompt[1] for k in range(100)]
    assert weights[0] == 1.0
    assert weights == pytest.approx([ramp(start3 + k, start3, 100) for k in range(100)], abs=1e-12)
    assert all(a > b for a, b in zip(weights, weights[1:]))
    assert sched.steps[start3 + 100].audio_prompt is None  # ramp has reached 0.0
    assert all(sched.steps[i].audio_prompt is None for i in range(*sched.part_spans[1]))


def test_audio_prompt_does_not_touch_text_weights():
    sched = compile_schedule(parse_plan(ABA), frame_rate=10)
    start3 = sched.part_spans[3][0]
    assert sched.steps[start3].text_conditions == ((3, 1.0),)


def test_audio_prompt_clamped_to_short_source():
    plan = parse_plan('{"1": ["a", 10, null], "2": ["b", 140, 1]}')
    sched = compile_schedule(plan, frame_rate=10, transition_s=5)
    assert sched.audio_requests[0].length_steps == 100


def test_transition_longer_than_part_rejected():
    with pytest.raises(ScheduleError, match="longer than the shortest part"):
        compile_schedule(two_part(146, 4), frame_rate=10, transition_s=5)


@pytest.mark.parametrize("rate", [0, -1])
def test_bad_frame_rate(rate):
    with pytest.raises(ScheduleError):
        compile_schedule(two_part(), frame_rate=rate)


def test_rounding_last_part_absorbs_residual():
    plan = parse_plan('{"1": ["a", 33.35, null], "2": ["b", 33.35, null], "3": ["c", 83.3, null]}')
    counts = part_step_counts(plan, 10)
    assert counts[:2] == [round_half_up(333.5)] * 2 == [334, 334]
    assert sum(counts) == 1500


# --- properties -----------------------------------------------------------

prompts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20).filter(
    lambda s: s.strip()
)


@st.composite
def plans(draw):
    n = draw(st.integers(1, 6))
    lengths = draw(st.lists(st.integers(6, 60), min_size=n, max_size=n))
    parts = []
    for i in range(1, n + 1):
        ref = draw(st.one_of(st.none(), st.integers(1, i - 1))) if i > 1 else None
        parts.append(Part(i, draw(prompts), float(lengths[i - 1]) / draw(st.sampled_from([1, 2, 4])), ref))
    return FormPlan(tuple(parts))


@given(plans())
def test_serialize_parse_round_trip(plan):
    text = serialize_plan(plan)
    again = parse_plan(text)
    assert again == plan
    assert serialize_plan(again) == text


@given(plans(), st.sampled_from([5, 10, 12.5, 50]), st.sampled_from([0, 1, 1.5]))
def test_schedule_invariants(plan, rate, transition):
    sched = compile_schedule(plan, rate, transition_s=transition)
    assert len(sched) == round_half_up(plan.total_length_s * rate)
    counts = [b - a for a, b in sched.part_spans.values()]
    assert counts[:-1] == [round_half_up(p.length_s * rate) for p in plan.parts[:-1]]
    assert sum(counts) == len(sched)
    for step in sched.steps:
        weights = [w for _, w in step.text_conditions]
        assert all(w >= 0 for w in weights)
        assert abs(sum(weights) - 1.0) <= 1e-12
        if step.audio_prompt is not None:
            assert 0 <= step.audio_prompt[1] <= 1
    # each condition's trajectory is continuous: no jump larger than one ramp increment
    trans_steps = round_half_up(transition * rate)
    max_jump = 1.0 / trans_steps if trans_steps else 1.0
    for part in plan.parts:
        traj = sched.weights(part.index)
        jumps = [abs(b - a) for a, b in zip(traj, traj[1:])]
        assert max(jumps, default=0) <= max_jump + 1e-12
