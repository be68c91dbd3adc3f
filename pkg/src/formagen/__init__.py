"""Long-form music with explicit musical form: LLM plans, blended conditioning, structure metrics."""

from .form_plan import (
    ConditioningSchedule,
    FormPlan,
    Part,
    PlanConstraints,
    PlanError,
    compile_schedule,
    parse_plan,
    serialize_plan,
    validate_plan,
)
from .sampler import (
    Condition,
    SamplerParams,
    TokenSequence,
    ToyBigramModel,
    apply_cfg,
    apply_temperature,
    blend_distributions,
    condition_from_prompt,
    fade_weight,
    generate_tokens,
)
from .structure_eval import frechet_distance, fuse_ssms, gaussian_summary, structure_matrices

__version__ = "0.1.0"
