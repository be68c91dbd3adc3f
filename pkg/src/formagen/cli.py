"""formagen command line: plan, generate, evaluate, compare.

Exit codes: 0 success, 2 input/validation error, 3 backend/transport error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import form_plan, planner, sampler, structure_eval, synth

log = logging.getLogger("formagen")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        self.code = code
        super().__init__(message)


@dataclass
class RunConfig:
    total_length_s: float = 150.0
    frame_rate: Optional[float] = None  # None -> 10 for toy, 50 for remote
    transition_s: float = 5.0
    audio_prompt_s: float = 15.0
    audio_fade_s: float = 10.0
    temperature: float = 1.0
    cfg_gamma: float = sampler.DEFAULT_CFG_GAMMA
    seed: int = 0
    model_seed: int = 1234
    vocab_size: int = sampler.DEFAULT_VOCAB
    sample_rate: int = synth.DEFAULT_SAMPLE_RATE
    backend: str = "toy"
    endpoint: Optional[str] = None
    timeout_s: float = 120.0
    pieces: int = 10
    max_retries: int = 3
    llm_model: str = "gpt-4"
    jobs: int = 1
    out: str = "."

    def __post_init__(self):
        for name in ("total_length_s", "transition_s", "audio_prompt_s", "audio_fade_s", "temperature"):
            if getattr(self, name) < 0 or (name in ("total_length_s", "temperature") and getattr(self, name) == 0):
                raise CLIError(f"{name} must be positive")
        if self.frame_rate is not None and self.frame_rate <= 0:
            raise CLIError("frame_rate must be positive")

    @property
    def effective_frame_rate(self) -> float:
        if self.frame_rate is not None:
            return float(self.frame_rate)
        return 50.0 if self.backend == "remote" else 10.0

    @property
    def backend_descriptor(self) -> synth.BackendDescriptor:
        try:
            return synth.BackendDescriptor(self.backend, self.endpoint, self.timeout_s)
        except ValueError as exc:
            raise CLIError(str(exc)) from exc


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise CLIError("config file must hold a JSON object")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise CLIError(f"unknown config keys: {unknown}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


# --------------------------------------------------------------------------- #
# plan

def cmd_plan(cfg: RunConfig, brief: str = "", fixture: Optional[str] = None) -> list[Path]:
    out = Path(cfg.out)
    client = planner.ReplayChatClient.from_file(fixture) if fixture else planner.HTTPChatClient(
        model=cfg.llm_model, timeout_s=cfg.timeout_s
    )
    pconf = planner.PlannerConfig(
        pieces_requested=cfg.pieces,
        total_length_s=cfg.total_length_s,
        max_retries=cfg.max_retries,
        brief=brief,
    )
    result = planner.request_plans(client, pconf)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, plan in enumerate(result.plans, start=1):
        path = out / f"plan_{i:02d}.json"
        path.write_text(form_plan.serialize_plan(plan) + "\n", encoding="utf-8")
        written.append(path)
    (out / "transcript.json").write_text(result.raw_transcript.to_json() + "\n", encoding="utf-8")
    for text, violations in result.rejected:
        log.warning("rejected plan: %s", "; ".join(violations))
    return written


# --------------------------------------------------------------------------- #
# generate

def load_plan(path) -> form_plan.FormPlan:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot read plan {path}: {exc}") from exc
    try:
        return form_plan.parse_plan(text)
    except form_plan.PlanError as exc:
        raise CLIError(f"{path}: {exc}") from exc


def generate_toy(plan: form_plan.FormPlan, cfg: RunConfig) -> sampler.TokenSequence:
    try:
        schedule = form_plan.compile_schedule(
            plan, cfg.effective_frame_rate, cfg.transition_s, cfg.audio_prompt_s, cfg.audio_fade_s
        )
        params = sampler.SamplerParams(cfg.temperature, cfg.cfg_gamma, cfg.seed, cfg.vocab_size)
    except (form_plan.ScheduleError, sampler.SamplerError) as exc:
        raise CLIError(str(exc)) from exc
    model = sampler.ToyBigramModel(cfg.vocab_size, seed=cfg.model_seed)
    return sampler.generate_tokens(model, schedule, params)


def _fit_length(buf: synth.AudioBuffer, n: int) -> np.ndarray:
    x = buf.samples[:n]
    return np.pad(x, (0, n - x.size)) if x.size < n else x


def generate_remote(plan: form_plan.FormPlan, cfg: RunConfig) -> synth.AudioBuffer:
    """Per-part requests to the remote backend, joined with linear crossfades.

    Every part after the first is requested ``transition_s`` longer; its lead-in
    is crossfaded over the last ``transition_s`` of the outgoing part, so the
    total stays exact and the blend sits inside the outgoing part.
    """
    backend = cfg.backend_descriptor
    trans = cfg.transition_s
    sr = None
    rendered: dict[int, synth.AudioBuffer] = {}
    piece = np.zeros(0)
    for k, part in enumerate(plan.parts):
        lead = trans if k > 0 else 0.0
        duration = part.length_s + lead
        continuation = None
        if part.referenced_part is not None:
            src = rendered[part.referenced_part]
            n_tail = min(int(round(cfg.audio_prompt_s * src.sample_rate)), len(src))
            continuation = synth.AudioBuffer(src.sample_rate, src.samples[len(src) - n_tail:])
        buf = synth.remote_generate(backend, part.prompt, duration, continuation)
        if sr is None:
            sr = buf.sample_rate
        elif buf.sample_rate != sr:
            raise synth.BackendResponseError(f"sample rate changed from {sr} to {buf.sample_rate} Hz")
        x = _fit_length(buf, int(round(duration * sr)))
        n_x = min(int(round(lead * sr)), piece.size)
        rendered[part.index] = synth.AudioBuffer(sr, x[n_x:])
        if n_x:
            ramp = (np.arange(n_x) + 0.5) / n_x
            piece[-n_x:] = piece[-n_x:] * (1.0 - ramp) + x[:n_x] * ramp
            x = x[n_x:]
        piece = np.concatenate([piece, x])
    total = int(round(plan.total_length_s * sr))
    return synth.AudioBuffer(sr, np.clip(_fit_length(synth.AudioBuffer(sr, piece), total), -1.0, 1.0))


def cmd_generate(cfg: RunConfig, plan_path) -> dict[str, Path]:
    plan = load_plan(plan_path)
    constraints = form_plan.PlanConstraints(
        total_length_s=cfg.total_length_s, min_part_s=min(form_plan.DEFAULT_MIN_PART_S, cfg.total_length_s)
    )
    violations = form_plan.validate_plan(plan, constraints)
    if violations:
        raise CLIError(f"{plan_path}: " + "; ".join(violations))
    shortest = min(p.length_s for p in plan.parts)
    if len(plan.parts) > 1 and cfg.transition_s > shortest:
        raise CLIError(f"{plan_path}: transition_s {cfg.transition_s:g} is longer than the shortest part ({shortest:g} s)")
    out = Path(cfg.out)
    stem = Path(plan_path).stem
    outputs = {}
    if cfg.backend == "toy":
        tokens = generate_toy(plan, cfg)
        audio = synth.render_tokens(tokens, cfg.sample_rate)
        out.mkdir(parents=True, exist_ok=True)
        outputs["tokens"] = out / f"{stem}.fgtk"
        sampler.write_tokens(tokens, outputs["tokens"])
    else:
        try:
            audio = generate_remote(plan, cfg)
        except synth.BackendError as exc:
            raise CLIError(str(exc), EXIT_BACKEND) from exc
        out.mkdir(parents=True, exist_ok=True)
    outputs["wav"] = out / f"{stem}.wav"
    synth.write_wav(audio, outputs["wav"])
    return outputs


# --------------------------------------------------------------------------- #
# evaluate / compare

def _analyse(path: str):
    audio = synth.read_wav(path)
    fused, down = structure_eval.structure_matrices(audio)
    return fused, down


def analyse_dir(audio_dir, jobs: int = 1) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Fused and 5 x 5 matrices for every readable WAV, in sorted filename order."""
    d = Path(audio_dir)
    if not d.is_dir():
        raise CLIError(f"{audio_dir} is not a directory")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")
    results = []
    if jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_analyse, str(p)) for p in paths]
            outcomes = []
            for p, fut in zip(paths, futures):
                try:
                    outcomes.append((p, fut.result(), None))
                except Exception as exc:  # noqa: BLE001 - reported and skipped
                    outcomes.append((p, None, exc))
    else:
        outcomes = []
        for p in paths:
            try:
                outcomes.append((p, _analyse(str(p)), None))
            except Exception as exc:  # noqa: BLE001 - reported and skipped
                outcomes.append((p, None, exc))
    for p, res, exc in outcomes:
        if exc is not None:
            log.warning("skipping %s: %s", p.name, exc)
            continue
        results.append((p.stem, res[0], res[1]))
    return results


def cmd_evaluate(cfg: RunConfig, audio_dir) -> structure_eval.SSMStats:
    results = analyse_dir(audio_dir, cfg.jobs)
    if not results:
        raise CLIError(f"no usable WAV files in {audio_dir}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, fused, down in results:
        structure_eval.write_pgm(fused, out / f"{name}_fused.pgm")
        structure_eval.write_matrix_csv(fused, out / f"{name}_fused.csv")
        structure_eval.write_matrix_csv(down, out / f"{name}_5x5.csv")
    stats = structure_eval.corpus_stats([down for _, _, down in results])
    structure_eval.write_matrix_csv(stats.mean, out / "mean.csv")
    structure_eval.write_matrix_csv(stats.variance, out / "variance.csv")
    return stats


def corpus_summary(audio_dir, jobs: int = 1) -> structure_eval.GaussianSummary:
    results = analyse_dir(audio_dir, jobs)
    if len(results) < 2:
        raise CLIError(f"{audio_dir}: need at least 2 usable WAV files, found {len(results)}")
    return structure_eval.gaussian_summary([structure_eval.upper_triangle_vec(d) for _, _, d in results])


def cmd_compare(cfg: RunConfig, dir_a, dir_b) -> float:
    a = corpus_summary(dir_a, cfg.jobs)
    b = corpus_summary(dir_b, cfg.jobs)
    distance = structure_eval.frechet_distance(a, b)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"corpus_a": str(dir_a), "corpus_b": str(dir_b), "frechet_distance": distance}
    (out / "frechet.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return distance


# --------------------------------------------------------------------------- #
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--backend", choices=("toy", "remote"))
    common.add_argument("--endpoint")
    common.add_argument("--pieces", type=int)
    common.add_argument("--out")
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="formagen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("plan", parents=[common], help="ask an LLM for form plans")
    p.add_argument("--brief", default="", help="extra direction appended to the instruction prompt")
    p.add_argument("--fixture", help="replay a recorded transcript instead of calling the endpoint")
    p = sub.add_parser("generate", parents=[common], help="render one plan to tokens and WAV")
    p.add_argument("plan")
    p = sub.add_parser("evaluate", parents=[common], help="fused SSMs and corpus stats for a WAV folder")
    p.add_argument("audio_dir")
    p = sub.add_parser("compare", parents=[common], help="Frechet distance between two WAV folders")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "backend", "endpoint", "pieces", "out", "jobs")}
    if overrides["endpoint"] is None and args.command == "generate":
        overrides["endpoint"] = os.environ.get("FORMAGEN_MUSIC_URL")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "plan":
            files = cmd_plan(cfg, args.brief, args.fixture)
            print(f"wrote {len(files)} plan(s) to {cfg.out}")
        elif args.command == "generate":
            outputs = cmd_generate(cfg, args.plan)
            print("\n".join(str(p) for p in outputs.values()))
        elif args.command == "evaluate":
            stats = cmd_evaluate(cfg, args.audio_dir)
            print(f"evaluated {stats.count} file(s); mean/variance written to {cfg.out}")
        elif args.command == "compare":
            print(f"{cmd_compare(cfg, args.dir_a, args.dir_b):.6g}")
    except CLIError as exc:
        print(f"formagen: {exc}", file=sys.stderr)
        return exc.code
    except planner.TransportError as exc:
        print(f"formagen: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except planner.PlannerError as exc:
        print(f"formagen: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
