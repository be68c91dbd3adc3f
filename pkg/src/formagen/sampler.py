"""Token-level sampling: CFG, temperature, distribution blending, audio-prompt decay.

The generator works against any object with the :class:`TokenModel` shape.
:class:`ToyBigramModel` is a deterministic order-1 stand-in for a neural
music model, small enough to run a 150 s piece in well under a second.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .form_plan import ConditioningSchedule, ramp_weight, round_half_up

UNCONDITIONAL_SEED = 0
DEFAULT_VOCAB = 64
DEFAULT_CFG_GAMMA = 3.0
TOKEN_MAGIC = b"FGTK"
TOKEN_VERSION = 1

fade_weight = ramp_weight


class SamplerError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# value types

@dataclass(frozen=True)
class Condition:
    id: str
    seed: int


def normalize_prompt(prompt: str) -> str:
    return " ".join(prompt.lower().split())


def condition_from_prompt(prompt: str) -> Condition:
    """Stable 64-bit seed from the lowercased, whitespace-collapsed prompt."""
    text = normalize_prompt(prompt or "")
    if not text:
        raise SamplerError("empty prompt")
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    if seed == UNCONDITIONAL_SEED:
        seed = 1
    return Condition(id=f"{seed:016x}", seed=seed)


@dataclass(frozen=True)
class SamplerParams:
    temperature: float = 1.0
    cfg_gamma: float = DEFAULT_CFG_GAMMA
    rng_seed: int = 0
    vocabulary_size: int = DEFAULT_VOCAB

    def __post_init__(self):
        if not self.temperature > 0:
            raise SamplerError(f"temperature must be positive, got {self.temperature}")
        if self.cfg_gamma < 0:
            raise SamplerError(f"cfg_gamma must be >= 0, got {self.cfg_gamma}")
        if self.vocabulary_size < 2:
            raise SamplerError("vocabulary_size must be >= 2")


@dataclass
class TokenSequence:
    tokens: np.ndarray
    frame_rate: float
    vocab_size: int = DEFAULT_VOCAB

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise SamplerError(f"tokens must lie in [0, {self.vocab_size})")

    def __len__(self):
        return int(self.tokens.size)

    @property
    def duration_s(self) -> float:
        return len(self) / self.frame_rate


# --------------------------------------------------------------------------- #
# models

class TokenModel(Protocol):
    vocab_size: int
    order: int

    def logits(self, context: Sequence[int], seed: int) -> np.ndarray: ...

    def prompt_logits(self, context: Sequence[int], prompt_tokens: np.ndarray) -> np.ndarray: ...


class ToyBigramModel:
    """Order-1 conditional logit table over ``vocab_size`` tokens.

    Row ``vocab_size`` of every table is the start-of-sequence row. The
    unconditional branch (seed 0) uses the shared base table. A condition
    seed adds a boost to a seed-specific subset of tokens plus a small
    seed-specific bigram perturbation, so each prompt has its own
    recognisable vocabulary. Audio prompts bias toward the tokens that
    occur in the prompt.
    """

    order = 1

    def __init__(self, vocab_size: int = DEFAULT_VOCAB, seed: int = 1234,
                 subset_size: int = 4, boost: float = 4.0, perturbation: float = 0.5,
                 prompt_boost: float = 4.0):
        if vocab_size < 2:
            raise SamplerError("vocab_size must be >= 2")
        self.vocab_size = vocab_size
        self.seed = seed
        self.subset_size = min(subset_size, vocab_size)
        self.boost = boost
        self.perturbation = perturbation
        self.prompt_boost = prompt_boost
        rng = np.random.Generator(np.random.PCG64(seed))
        self.base = rng.standard_normal((vocab_size + 1, vocab_size))
        self.base.setflags(write=False)
        self._tables: dict[int, np.ndarray] = {UNCONDITIONAL_SEED: self.base}
        self._lock = threading.Lock()

    def boosted_tokens(self, seed: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64([self.seed, seed]))
        return np.sort(rng.choice(self.vocab_size, self.subset_size, replace=False))

    def table(self, seed: int) -> np.ndarray:
        tab = self._tables.get(seed)
        if tab is None:
            rng = np.random.Generator(np.random.PCG64([self.seed, seed, 1]))
            tab = self.base + self.perturbation * rng.standard_normal(self.base.shape)
            tab[:, self.boosted_tokens(seed)] += self.boost
            tab.setflags(write=False)
            with self._lock:
                tab = self._tables.setdefault(seed, tab)
        return tab

    def row_index(self, context: Sequence[int]) -> int:
        if len(context) > self.order:
            raise SamplerError(f"context longer than model order {self.order}")
        return int(context[-1]) if len(context) else self.vocab_size

    def logits(self, context: Sequence[int], seed: int = UNCONDITIONAL_SEED) -> np.ndarray:
        return self.table(seed)[self.row_index(context)].copy()

    def prompt_logits(self, context: Sequence[int], prompt_tokens: np.ndarray) -> np.ndarray:
        counts = np.bincount(np.asarray(prompt_tokens, dtype=np.int64), minlength=self.vocab_size)
        bias = counts / counts.max() if counts.max() > 0 else counts.astype(float)
        return self.base[self.row_index(context)] + self.prompt_boost * bias


def next_logits(model, context: Sequence[int], condition: Optional[Condition] = None) -> np.ndarray:
    """Logits for the next token given the last ``model.order`` tokens."""
    seed = UNCONDITIONAL_SEED if condition is None else condition.seed
    return np.asarray(model.logits(list(context)[-model.order:] if model.order else [], seed), dtype=float)


# --------------------------------------------------------------------------- #
# distribution arithmetic

def apply_cfg(uncond, cond, gamma: float) -> np.ndarray:
    """``uncond + gamma * (cond - uncond)``, written so gamma 0 and 1 are exact."""
    u = np.asarray(uncond, dtype=float)
    c = np.asarray(cond, dtype=float)
    if u.shape != c.shape:
        raise SamplerError(f"length mismatch: {u.shape} vs {c.shape}")
    return (1.0 - gamma) * u + gamma * c


def apply_temperature(logits, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise SamplerError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def blend_distributions(p_a, p_b, w: float) -> np.ndarray:
    """``w * p_a + (1 - w) * p_b``."""
    if not 0.0 <= w <= 1.0:
        raise SamplerError(f"blend weight must be in [0, 1], got {w}")
    a = np.asarray(p_a, dtype=float)
    b = np.asarray(p_b, dtype=float)
    if a.shape != b.shape:
        raise SamplerError(f"length mismatch: {a.shape} vs {b.shape}")
    return w * a + (1.0 - w) * b


def sample_token(p: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw: one ``rng.random()`` per token."""
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical draws on every platform for the same seed."""
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------- #
# generation

@dataclass
class StepTrace:
    step: int
    context: tuple[int, ...]
    conditions: tuple[tuple[int, float], ...]
    condition_probs: dict[int, np.ndarray]
    text_probs: np.ndarray
    audio: Optional[tuple[int, float]]
    audio_probs: Optional[np.ndarray]
    final_probs: np.ndarray
    token: int


def extract_audio_prompt_tokens(source: TokenSequence, length_s: float) -> TokenSequence:
    n = round_half_up(length_s * source.frame_rate)
    if n > len(source):
        raise SamplerError(
            f"source holds {len(source)} tokens ({source.duration_s:g} s); {n} requested ({length_s:g} s)"
        )
    tail = source.tokens[len(source) - n:] if n else source.tokens[:0]
    return TokenSequence(tail.copy(), source.frame_rate, source.vocab_size)


def generate_tokens(
    model,
    schedule: ConditioningSchedule,
    params: SamplerParams,
    hook: Optional[Callable[[StepTrace], None]] = None,
) -> TokenSequence:
    """Sample one token per schedule step.

    Per step: one unconditional evaluation shared by every condition; CFG
    in logit space per condition; temperature softmax; blend in probability
    space with the step's text weights; mix in the audio-prompt
    distribution with weight ``w_a``; draw.
    """
    if params.vocabulary_size != model.vocab_size:
        raise SamplerError(
            f"vocabulary mismatch: params say {params.vocabulary_size}, model has {model.vocab_size}"
        )
    conditions = {part: condition_from_prompt(prompt) for part, prompt in schedule.prompts.items()}
    requests = {r.part: r for r in schedule.audio_requests}
    rng = make_rng(params.rng_seed)
    order = model.order
    tokens = np.zeros(len(schedule.steps), dtype=np.int64)
    cache: dict[tuple, np.ndarray] = {}
    prompt_tokens: dict[int, np.ndarray] = {}
    context: list[int] = []

    def memo(key, make):
        v = cache.get(key)
        if v is None:
            v = cache[key] = make()
            v.setflags(write=False)
        return v

    for i, step in enumerate(schedule.steps):
        req = requests.get(step.part)
        if req is not None and i == schedule.part_spans[step.part][0]:
            s0, s1 = schedule.part_spans[req.source_part]
            source = TokenSequence(tokens[s0:s1], schedule.frame_rate, model.vocab_size)
            primer = extract_audio_prompt_tokens(source, req.length_steps / schedule.frame_rate).tokens
            prompt_tokens[step.part] = primer
            context = [int(t) for t in primer]
        ctx = tuple(context[-order:]) if order else ()
        uncond = memo(("u", ctx), lambda: next_logits(model, ctx, None))

        cond_probs = {}
        for cid, _ in step.text_conditions:
            cond = conditions[cid]
            cond_probs[cid] = memo(
                ("c", ctx, cond.seed),
                lambda: apply_temperature(
                    apply_cfg(uncond, next_logits(model, ctx, cond), params.cfg_gamma), params.temperature
                ),
            )
        if len(step.text_conditions) == 1:
            p_text = cond_probs[step.text_conditions[0][0]]
        else:
            (ca, wa), (cb, _) = step.text_conditions
            p_text = blend_distributions(cond_probs[ca], cond_probs[cb], wa)

        p_audio = None
        if step.audio_prompt is not None:
            _, w_a = step.audio_prompt
            primer = prompt_tokens[step.part]
            p_audio = memo(
                ("a", ctx, step.part),
                lambda: apply_temperature(
                    apply_cfg(uncond, model.prompt_logits(list(ctx), primer), params.cfg_gamma),
                    params.temperature,
                ),
            )
            p_final = blend_distributions(p_audio, p_text, w_a)
        else:
            p_final = p_text

        tok = sample_token(p_final, rng)
        tokens[i] = tok
        context.append(tok)
        if len(context) > max(order, 1) * 4:
            del context[: len(context) - order]
        if hook is not None:
            hook(StepTrace(i, ctx, step.text_conditions, cond_probs, p_text,
                           step.audio_prompt, p_audio, p_final, tok))
    return TokenSequence(tokens, schedule.frame_rate, model.vocab_size)


# --------------------------------------------------------------------------- #
# token file I/O

_HEADER = struct.Struct("<4sIIdQ")


def token_bytes(seq: TokenSequence) -> bytes:
    header = _HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, seq.vocab_size, float(seq.frame_rate), len(seq))
    return header + seq.tokens.astype("<u4").tobytes()


def tokens_from_bytes(data: bytes) -> TokenSequence:
    if len(data) < _HEADER.size:
        raise SamplerError("token file truncated (no header)")
    magic, version, vocab, frame_rate, count = _HEADER.unpack_from(data)
    if magic != TOKEN_MAGIC:
        raise SamplerError(f"not a token file (magic {magic!r})")
    if version != TOKEN_VERSION:
        raise SamplerError(f"unsupported token file version {version}")
    body = data[_HEADER.size:]
    if len(body) != 4 * count:
        raise SamplerError(f"token file declares {count} tokens but holds {len(body) // 4}")
    tokens = np.frombuffer(body, dtype="<u4").astype(np.int64)
    return TokenSequence(tokens, frame_rate, vocab)


def write_tokens(seq: TokenSequence, path) -> None:
    with open(path, "wb") as fh:
        fh.write(token_bytes(seq))


def read_tokens(path) -> TokenSequence:
    with open(path, "rb") as fh:
        return tokens_from_bytes(fh.read())
