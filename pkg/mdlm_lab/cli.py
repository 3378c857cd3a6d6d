"""``mdlm-lab`` command line.

Every command writes into its output directory and finishes with a
``manifest.json`` holding the resolved configuration and the sha256 of every
input and output file. Passing that manifest back through ``--config`` reruns the
command with the same settings.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from ._utils.errors import intercept_errors
from ._utils.seeding import derive_seed, derived_rng
from .charts import CompositeChart, LineChart, render_svg
from .common.errors import ConfigError, DivergenceError, DomainError, LabError, ParseError
from .config import (
    CommandOptions,
    DecodeOptions,
    DenoiserKind,
    GenCorpusOptions,
    HazardOptions,
    MetricsOptions,
    R2FTOptions,
    SweepAxis,
    SweepOptions,
    TrainOptions,
    parse_assignments,
    resolve_options,
)
from .core import SequenceState, VocabSpec
from .corpus import (
    compute_prior,
    corpus_ppl_stats,
    design_corpus_model,
    generate_corpus_sharded,
    load_corpus,
    load_corpus_model,
    load_prior,
    save_corpus,
    save_corpus_model,
    save_prior,
)
from .decoding import DecodePolicy, decode_batch, read_trace_csv, write_trace_csv
from .denoiser import DenoiserParams, LinearDenoiser, OracleDenoiser, TrainConfig, load_params, save_params, train_sft
from .hazard import hazard_grid, write_hazard_csv
from .metrics import (
    aggregate_speed,
    candidate_zone,
    content_tokens,
    inlier_rate,
    mean_log_prior,
    sample_ppl,
    score_samples,
    speed_report,
    validate_trace,
)
from .protocols import Denoiser
from .r2ft import CorruptionConfig, R2FTConfig, train_r2ft

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
INPUT_FIELDS = ("corpus", "params", "prior", "corpus_model")
EXIT_CODES = {ConfigError: 2, ParseError: 3, DomainError: 4, DivergenceError: 5}

CommandResult = Tuple[List[Path], List[Path]]


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def exit_code(error: BaseException) -> int:
    """2 config, 3 parse, 4 domain, 5 divergence, 1 anything else."""
    for cls in type(error).__mro__:
        if cls in EXIT_CODES:
            return EXIT_CODES[cls]
    return 1


def configure_logging(level: str) -> None:
    if not isinstance(logging.getLevelName(level.upper()), int):
        raise ConfigError(f"Unknown log level: {level}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    package_logger = logging.getLogger("mdlm_lab")
    package_logger.handlers[:] = [handler]
    package_logger.setLevel(level.upper())


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out: Path, command: str, options: CommandOptions, inputs: Sequence[Path], outputs: Sequence[Path]):
    config = options.model_dump(mode="json")
    config["out"] = out.as_posix()
    payload = {
        "command": command,
        "mdlm_lab": __version__,
        "config": config,
        "inputs": {path.as_posix(): sha256_file(path) for path in inputs},
        "outputs": {path.relative_to(out).as_posix(): sha256_file(path) for path in sorted(outputs)},
    }
    (out / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(value) if isinstance(value, float) else value for value in row])


def _mean(values: Sequence[float]) -> float:
    finite = [value for value in values if not math.isnan(value)]
    return float(np.mean(finite)) if finite else math.nan


def _input_paths(options: CommandOptions) -> List[Path]:
    return [Path(getattr(options, name)) for name in INPUT_FIELDS if getattr(options, name, None)]


def build_denoiser(options: DecodeOptions, vocab: VocabSpec) -> Denoiser:
    if options.denoiser is DenoiserKind.ORACLE:
        model = load_corpus_model(options.corpus_model)
        if model.vocab.content_size != vocab.content_size:
            raise ConfigError(
                f"Corpus model has {model.vocab.content_size} content tokens, corpus has {vocab.content_size}"
            )
        return OracleDenoiser(model, options.posterior)
    return LinearDenoiser(load_params(options.params, vocab), vocab)


def _prompts(examples, count: int) -> List[List[int]]:
    if not examples:
        raise DomainError("The corpus has no examples to take prompts from")
    return [list(examples[i % len(examples)].prompt) for i in range(count)]


# --- commands --------------------------------------------------------------------


def gen_corpus(options: GenCorpusOptions, out: Path) -> CommandResult:
    model = design_corpus_model(
        options.content_size,
        options.seed,
        n_templates=options.templates,
        prompt_len=(options.prompt_min, options.prompt_max),
        branching=options.branching,
        n_function_words=options.function_words,
        function_mass=options.function_mass,
        copy_rate=options.copy_rate,
        eos_rate=options.eos_rate,
        max_response_len=options.max_response_len,
    )
    examples = generate_corpus_sharded(model, options.n, derive_seed(options.seed, 1), options.shards, options.jobs)
    prior = compute_prior(examples, model.vocab)
    outputs = [out / "corpus.jsonl", out / "corpus_model.json", out / "prior.json"]
    save_corpus(outputs[0], examples, model.vocab, options.seed)
    save_corpus_model(outputs[1], model)
    save_prior(outputs[2], prior)
    logger.info("Generated %d examples over %d content tokens", len(examples), options.content_size)
    return [], outputs


def _loss_chart(title: str, series: Dict[str, List[Tuple[float, float]]]) -> LineChart:
    elements = [{"label": label, "points": points} for label, points in series.items()]
    return LineChart(title=title, x_label="step", y_label="loss", elements=elements)


def train(options: TrainOptions, out: Path) -> CommandResult:
    corpus = load_corpus(options.corpus)
    vocab = corpus.vocab
    if options.params:
        params = load_params(options.params, vocab)
    elif options.init_scale > 0:
        params = DenoiserParams.random(vocab, derived_rng(options.seed, 3), options.init_scale, options.radius)
    else:
        params = DenoiserParams.zeros(vocab, options.radius)
    config = TrainConfig(
        steps=options.steps,
        learning_rate=options.learning_rate,
        batch_size=options.batch_size,
        window=options.window,
        schedule_steps=options.schedule_steps,
        seed=options.seed,
        eval_every=options.eval_every,
        held_out_fraction=options.held_out_fraction,
        eos_mode=options.eos_mode,
    )
    params, history = train_sft(params, corpus.examples, vocab, config)
    outputs = [out / "params.json", out / "train_history.csv"]
    save_params(outputs[0], params)
    history.write_csv(outputs[1])
    if history.records:
        points = [(record.step, record.held_out_loss) for record in history.records]
        outputs.append(out / "train_history.svg")
        render_svg(_loss_chart("SFT held-out loss", {"held-out": points}), outputs[-1])
    return _input_paths(options), outputs


def r2ft(options: R2FTOptions, out: Path) -> CommandResult:
    corpus = load_corpus(options.corpus)
    vocab = corpus.vocab
    params = load_params(options.params, vocab)
    prior = load_prior(options.prior) if options.prior else None
    config = R2FTConfig(
        steps=options.steps,
        learning_rate=options.learning_rate,
        batch_size=options.batch_size,
        window=options.window,
        gamma=options.gamma,
        beta=options.beta,
        corruption=CorruptionConfig(
            g_max=options.g_max, z_min=options.z_min, z_max=options.z_max, eos_insert=options.eos_insert
        ),
        seed=options.seed,
        eval_every=options.eval_every,
        eval_size=options.eval_size,
        sample_prompts=options.sample_prompts,
        sample_steps=options.sample_steps,
        top_k=options.top_k,
    )
    params, history = train_r2ft(params, corpus.examples, vocab, config, prior)
    outputs = [out / "params.json", out / "r2ft_history.csv"]
    save_params(outputs[0], params)
    history.write_csv(outputs[1])
    if history.records:
        series = {
            "objective": [(r.step, r.loss) for r in history.records],
            "clean NLL": [(r.step, r.loss_w) for r in history.records],
            "corrupted NLL": [(r.step, r.loss_l) for r in history.records],
        }
        outputs.append(out / "r2ft_history.svg")
        render_svg(_loss_chart("Preference stage", series), outputs[-1])
    return _input_paths(options), outputs


def decode(options: DecodeOptions, out: Path) -> CommandResult:
    corpus = load_corpus(options.corpus)
    denoiser = build_denoiser(options, corpus.vocab)
    policy = options.policy()
    policy.check_window(options.window, options.steps, corpus.vocab)
    prompts = _prompts(corpus.examples, options.runs)
    results = decode_batch(denoiser, prompts, policy, options.window, options.steps, options.seed, options.jobs)

    outputs = [out / "policy.json", out / "decode_summary.csv"]
    outputs[0].write_text(policy.model_dump_json(indent=2) + "\n", encoding="utf-8")
    summary = []
    for index, (prompt, (state, trace)) in enumerate(zip(prompts, results)):
        run_dir = out / "runs" / f"run_{index:03d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_trace_csv(run_dir / "trace.csv", trace)
        sample = {
            "prompt": prompt,
            "L": options.window,
            "S": options.steps,
            "initial": trace.initial.tokens.tolist(),
            "prompt_spans": [list(span) for span in trace.initial.prompt_spans],
            "tokens": state.tokens.tolist(),
        }
        (run_dir / "sample.json").write_text(json.dumps(sample) + "\n", encoding="utf-8")
        outputs.extend([run_dir / "trace.csv", run_dir / "sample.json"])
        speed = speed_report(trace, options.steps)
        summary.append([index, speed.L_star, speed.S_star, speed.tokens_per_step, trace.clamped])
    _write_rows(outputs[1], ("run", "L_star", "S_star", "tokens_per_step", "clamped"), summary)
    logger.info("Decoded %d runs into %s", len(results), out)
    return _input_paths(options), outputs


@dataclass
class _SweepPoint:
    value: int
    seed_index: int
    L: int  # pylint: disable=invalid-name
    S: int  # pylint: disable=invalid-name
    policy: DecodePolicy


def _sweep_points(options: SweepOptions, vocab: VocabSpec) -> List[_SweepPoint]:
    points = []
    for value in options.values:
        L, S, changes = options.window, options.steps, {}  # pylint: disable=invalid-name
        if options.axis is SweepAxis.BLOCK_SIZE:
            if L % value:
                raise ConfigError(f"Block size {value} does not divide L={L}")
            changes["blocks"] = L // value
        elif options.axis is SweepAxis.KERNEL_SIZE:
            changes["conv_kernel"] = value
        else:
            S = value  # pylint: disable=invalid-name
        policy = options.policy(**changes)
        policy.check_window(L, S, vocab)
        points.extend(_SweepPoint(value, j, L, S, policy) for j in range(options.seeds))
    return points


SWEEP_RUN_HEADER = (
    "axis", "value", "seed_index", "L", "S", "mean_ppl", "inlier_rate", "mean_log_prior",
    "zero_length", "mean_L_star", "mean_S_star", "tokens_per_step",
)
SWEEP_HEADER = ("axis", "value", "runs", "mean_ppl", "inlier_rate", "mean_log_prior", "tokens_per_step")


def sweep(options: SweepOptions, out: Path) -> CommandResult:
    corpus = load_corpus(options.corpus)
    vocab = corpus.vocab
    model = load_corpus_model(options.corpus_model)
    prior = load_prior(options.prior)
    mu, sigma = corpus_ppl_stats(model, corpus.examples)
    denoiser = build_denoiser(options, vocab)
    prompts = _prompts(corpus.examples, options.runs)
    points = _sweep_points(options, vocab)

    def run(point: _SweepPoint) -> List[object]:
        seed = derive_seed(options.seed, point.seed_index)
        results = decode_batch(denoiser, prompts, point.policy, point.L, point.S, seed)
        scores = score_samples(model, [(p, state) for p, (state, _) in zip(prompts, results)], prior, mu, sigma)
        speed = aggregate_speed([speed_report(trace, point.S) for _, trace in results])
        return [
            str(options.axis), point.value, point.seed_index, point.L, point.S,
            scores.mean_ppl, scores.inlier_rate, scores.mean_log_prior, scores.zero_length,
            speed.mean_L_star, speed.mean_S_star, speed.tokens_per_step,
        ]

    logger.info("Sweeping %s over %s with %d seeds", options.axis, options.values, options.seeds)
    with ThreadPoolExecutor(max_workers=options.jobs) as executor:
        rows = list(executor.map(run, points))

    curve = []
    for value in options.values:
        mine = [row for row in rows if row[1] == value]
        curve.append(
            [str(options.axis), value, len(mine)] + [_mean([row[i] for row in mine]) for i in (5, 6, 7, 11)]
        )
    outputs = [out / "sweep_runs.csv", out / "sweep.csv", out / "sweep.svg"]
    _write_rows(outputs[0], SWEEP_RUN_HEADER, rows)
    _write_rows(outputs[1], SWEEP_HEADER, curve)

    def panel(title: str, column: int) -> dict:
        points = [(row[1], row[column]) for row in curve if not math.isnan(row[column])]
        return {"type": "line", "title": title, "x_label": str(options.axis), "x_scale": "log",
                "elements": [{"label": title, "points": points}]}

    chart = CompositeChart(
        title=f"{options.axis} sweep",
        elements=[panel("mean PPL", 3), panel("inlier rate", 4), panel("tokens per step", 6)],
    )
    render_svg(chart, outputs[2])
    return _input_paths(options), outputs


METRICS_HEADER = (
    "run", "L_star", "S_star", "tokens_per_step", "r_star", "ppl", "inlier", "mean_log_prior", "violations",
)


def metrics(options: MetricsOptions, out: Path) -> CommandResult:
    corpus = load_corpus(options.corpus)
    vocab = corpus.vocab
    model = load_corpus_model(options.corpus_model)
    prior = load_prior(options.prior)
    mu, sigma = corpus_ppl_stats(model, corpus.examples)
    runs_dir = Path(options.runs_dir)
    policy = DecodePolicy.model_validate_json((runs_dir / "policy.json").read_text(encoding="utf-8"))
    run_dirs = sorted((runs_dir / "runs").glob("run_*"))
    if not run_dirs:
        raise ConfigError(f"No decoding runs under {runs_dir}")

    rows, reports, samples, window = [], [], [], 0
    for run_dir in run_dirs:
        sample = json.loads((run_dir / "sample.json").read_text(encoding="utf-8"))
        initial = SequenceState(
            np.asarray(sample["initial"], dtype=np.int64), vocab, [tuple(span) for span in sample["prompt_spans"]]
        )
        trace = read_trace_csv(run_dir / "trace.csv", initial)
        prompt, window = sample["prompt"], int(sample["L"])
        report = speed_report(trace, int(sample["S"]), options.L_star_norm)
        ppl = sample_ppl(model, prompt, trace.final)
        response = trace.final.tokens[len(prompt) :]
        log_prior = mean_log_prior(response, prior, vocab) if content_tokens(response, vocab) else math.nan
        inlier = inlier_rate([ppl], mu, sigma, [math.isnan(ppl)])
        violations = validate_trace(policy, trace)
        for violation in violations:
            logger.warning("%s: %s at step %d: %s", run_dir.name, violation.kind, violation.step, violation.message)
        rows.append([
            run_dir.name, report.L_star, report.S_star, report.tokens_per_step, report.r_star,
            ppl, int(inlier), log_prior, len(violations),
        ])
        reports.append(report)
        samples.append((prompt, trace.final))

    outputs = [out / "metrics.csv", out / "metrics_summary.json"]
    _write_rows(outputs[0], METRICS_HEADER, rows)
    speed = aggregate_speed(reports)
    scores = score_samples(model, samples, prior, mu, sigma)
    summary = {
        "runs": len(rows),
        "corpus_ppl_mean": mu,
        "corpus_ppl_std": sigma,
        "mean_ppl": scores.mean_ppl,
        "inlier_rate": scores.inlier_rate,
        "mean_log_prior": scores.mean_log_prior,
        "zero_length": scores.zero_length,
        "mean_L_star": speed.mean_L_star,
        "mean_S_star": speed.mean_S_star,
        "tokens_per_step": speed.tokens_per_step,
        "mean_r_star": speed.mean_r_star,
        "violations": sum(row[-1] for row in rows),
    }
    outputs[1].write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")

    if options.zone_prompt >= len(corpus.examples):
        raise ConfigError(f"zone_prompt={options.zone_prompt} exceeds the corpus size {len(corpus.examples)}")
    if options.params:
        denoiser: Denoiser = LinearDenoiser(load_params(options.params, vocab), vocab)
    else:
        denoiser = OracleDenoiser(model)
    zone = candidate_zone(denoiser, corpus.examples[options.zone_prompt].prompt, prior, window, options.zone_top_k)
    outputs.extend([out / "candidate_zone.csv", out / "candidate_zone.svg"])
    zone.write_csv(outputs[2])
    chart = LineChart(
        title="Candidate zone",
        x_label="distance from prompt",
        y_label="probability mass",
        elements=[
            {"label": "high prior", "points": list(zip(zone.distances.tolist(), zone.high_prior_mass.tolist()))},
            {"label": "repetition", "points": list(zip(zone.distances.tolist(), zone.repetition_mass.tolist()))},
        ],
    )
    render_svg(chart, outputs[3])
    return _input_paths(options), outputs


def hazard(options: HazardOptions, out: Path) -> CommandResult:
    rows = hazard_grid(options.Ls, options.Ss, options.bs, options.hazard_family(), options.mode)
    if not rows:
        raise ConfigError("No admissible (L, S, b) combination in the grid")
    failing = sum(not row.ordering_ok for row in rows)
    if failing:
        logger.warning("Ordering fails on %d of %d grid points", failing, len(rows))
    output = out / "hazard.csv"
    write_hazard_csv(output, rows)
    return [], [output]


COMMANDS: Dict[str, Tuple[Callable[..., CommandResult], str, Tuple[str, ...]]] = {
    "gen-corpus": (gen_corpus, "Design the toy corpus and write corpus, model and prior", ()),
    "train": (train, "Fit the linear denoiser on the masked-diffusion objective", ("corpus", "params")),
    "r2ft": (r2ft, "Fine-tune against corrupted continuations", ("corpus", "params", "prior")),
    "decode": (decode, "Decode prompts and write per-run traces", ("corpus", "params", "corpus_model")),
    "sweep": (sweep, "Sweep block size, kernel size or steps", ("corpus", "params", "corpus_model", "prior")),
    "metrics": (metrics, "Score decoding runs", ("runs_dir", "corpus", "corpus_model", "prior", "params")),
    "hazard": (hazard, "Evaluate schedule survival over a grid", ()),
}


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file ([common] plus a section per command) or a run manifest")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="Output directory")
    common.add_argument("--jobs", type=int, help="Parallel workers")
    common.add_argument("--log-level", dest="log_level")
    common.add_argument(
        "--set", dest="assignments", action="append", metavar="KEY=VALUE", help="Override any option; repeatable"
    )

    parser = _ArgumentParser(prog="mdlm-lab", description="Masked diffusion language model lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, files) in COMMANDS.items():
        subparser = subparsers.add_parser(name, parents=[common], help=help_text)
        for field in files:
            subparser.add_argument(f"--{field.replace('_', '-')}", dest=field)
    return parser


@intercept_errors()
def run_command(command: str, options: CommandOptions) -> Path:
    """Runs one command and writes its manifest; returns the output directory."""
    out = options.output_dir(command)
    out.mkdir(parents=True, exist_ok=True)
    handler = COMMANDS[command][0]
    inputs, outputs = handler(options, out)
    write_manifest(out, command, options, inputs, outputs)
    logger.info("%s wrote %d files to %s", command, len(outputs), out)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code.

    Failures print one JSON record ``{"error", "message", "command"}`` on stderr.
    """
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        flags = parse_assignments(args.assignments)
        named = {key: value for key, value in vars(args).items() if key not in ("command", "config", "assignments")}
        flags.update({key: value for key, value in named.items() if value is not None})
        options = resolve_options(command, args.config, flags)
        configure_logging(options.log_level)
        run_command(command, options)
    except LabError as e:
        record = {"error": type(e).__name__, "message": str(e), "command": command}
        print(json.dumps(record), file=sys.stderr)
        return exit_code(e)
    return 0
