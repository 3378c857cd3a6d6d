"""Diagnostics: candidate zones, priors, oracle perplexity, speed and trace audits."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .common.errors import DomainError
from .core import SequenceState, VocabSpec
from .corpus import CorpusModel, PriorTable, oracle_score
from .decoding import BaseSampler, DecodePolicy, EventOrigin, TraceLog, replay_trace, transfer_counts
from .protocols import Denoiser

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class CandidateZoneReport:
    """Per-distance candidate statistics for one prompt.

    Distance ``d`` is the offset of a slot from the first slot after the prompt.
    A token that is both high-prior and present in the prompt counts toward both
    masses.

    Attributes:
        high_prior_mass (np.ndarray): Probability of the prior's top tokens per distance.
        repetition_mass (np.ndarray): Probability of prompt tokens per distance.
        top (List[List[Tuple[int, float]]]): ``k`` best ``(token, probability)`` per distance.
    """

    high_prior_mass: np.ndarray
    repetition_mass: np.ndarray
    top: List[List[Tuple[int, float]]] = field(default_factory=list)

    @property
    def distances(self) -> np.ndarray:
        return np.arange(self.high_prior_mass.shape[0])

    @property
    def combined(self) -> np.ndarray:
        return self.high_prior_mass + self.repetition_mass

    def write_csv(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["distance", "high_prior_mass", "repetition_mass", "top_tokens"])
            for distance, high, rep, top in zip(self.distances, self.high_prior_mass, self.repetition_mass, self.top):
                listing = " ".join(f"{token}:{prob:.6f}" for token, prob in top)
                writer.writerow([int(distance), repr(float(high)), repr(float(rep)), listing])


def candidate_zone(
    denoiser: Denoiser,
    prompt: Sequence[int],
    prior: PriorTable,
    L: int,  # pylint: disable=invalid-name
    k: int = 5,
) -> CandidateZoneReport:
    """Candidate statistics of the all-masked continuation, from one denoiser call.

    Raises:
        DomainError: If the prompt is empty or fills the window.
    """
    if not prompt:
        raise DomainError("candidate_zone needs a nonempty prompt")
    state = SequenceState.from_prompt(list(prompt), L, denoiser.vocab)
    grid = denoiser.predict(state)[len(prompt) :]
    high = grid[:, list(prior.top)].sum(axis=1)
    repeated = np.unique(np.asarray(prompt, dtype=np.int64))
    repetition = grid[:, repeated].sum(axis=1)
    order = np.argsort(-grid, axis=1, kind="stable")[:, :k]
    top = [[(int(tok), float(row[tok])) for tok in ranks] for row, ranks in zip(grid, order)]
    return CandidateZoneReport(np.minimum(high, 1.0), np.minimum(repetition, 1.0), top)


def zone_gap(report: CandidateZoneReport, near: Tuple[int, int] = (5, 15)) -> float:
    """Mean combined mass over distances ``near[0]..near[1]`` minus the mass at distance 0."""
    combined = report.combined
    band = combined[near[0] : near[1] + 1]
    if band.size == 0:
        raise DomainError(f"The window has no distances in {near}")
    return float(band.mean() - combined[0])


def content_tokens(tokens: Sequence[int], vocab: VocabSpec) -> List[int]:
    """Tokens before the first EOS, with MASK and PAD dropped."""
    content = []
    for token in tokens:
        token = int(token)
        if token == vocab.eos_id:
            break
        if vocab.is_content(token):
            content.append(token)
    return content


def mean_log_prior(tokens: Sequence[int], prior: PriorTable, vocab: VocabSpec) -> float:
    """Average log prior over the content region (before the first EOS).

    Raises:
        DomainError: If the content region is empty.
    """
    content = content_tokens(tokens, vocab)
    if not content:
        raise DomainError("mean_log_prior needs at least one content token")
    return float(np.mean(prior.log_prior[content]))


def inlier_rate(
    ppls: Sequence[float],
    mu: float,
    sigma: float,
    zero_length: Optional[Sequence[bool]] = None,
) -> float:
    """Fraction of perplexities inside ``[mu - 2 sigma, mu + 2 sigma]``.

    Entries flagged in ``zero_length`` are outliers whatever their value.

    Raises:
        DomainError: If ``ppls`` is empty or ``sigma`` is negative.
    """
    values = np.asarray(ppls, dtype=np.float64)
    if values.size == 0:
        raise DomainError("inlier_rate needs at least one value")
    if sigma < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma}")
    inside = (values >= mu - 2.0 * sigma) & (values <= mu + 2.0 * sigma)
    if zero_length is not None:
        inside &= ~np.asarray(zero_length, dtype=bool)
    return float(inside.mean())


@dataclass
class SpeedReport:
    """Speed accounting of one decoding run.

    Attributes:
        L_star (int): Decoded tokens before the first EOS.
        S_star (int): Denoiser calls.
        L_star_norm (float): Normalizer for ``tokens_per_step``; defaults to ``L_star``.
        tokens_per_step (float): ``L_star_norm / S_star``.
        r_star (float): ``L_star / S``.
    """

    L_star: int  # pylint: disable=invalid-name
    S_star: int  # pylint: disable=invalid-name
    L_star_norm: float  # pylint: disable=invalid-name
    tokens_per_step: float
    r_star: float


def tokens_per_step(L_star_norm: float, S_star: float) -> float:  # pylint: disable=invalid-name
    return L_star_norm / S_star if S_star else math.nan


def decoded_length(state: SequenceState) -> int:
    """Non-prompt tokens before the first EOS of a finished window."""
    start = state.prompt_spans[0][1] if state.prompt_spans and state.prompt_spans[0][0] == 0 else 0
    return len(content_tokens(state.tokens[start:], state.vocab))


def speed_report(trace: TraceLog, S: int, L_star_norm: Optional[float] = None) -> SpeedReport:  # pylint: disable=invalid-name
    final = trace.final if trace.final is not None else replay_trace(trace)
    length = decoded_length(final)
    calls = trace.denoiser_calls
    norm = float(length if L_star_norm is None else L_star_norm)
    return SpeedReport(length, calls, norm, tokens_per_step(norm, calls), length / S)


@dataclass
class SpeedSummary:
    mean_L_star: float  # pylint: disable=invalid-name
    mean_S_star: float  # pylint: disable=invalid-name
    tokens_per_step: float
    mean_r_star: float


def aggregate_speed(reports: Sequence[SpeedReport]) -> SpeedSummary:
    """Run-level means; ``tokens_per_step`` is the mean normalizer over the mean call count."""
    if not reports:
        raise DomainError("aggregate_speed needs at least one report")
    mean_norm = float(np.mean([report.L_star_norm for report in reports]))
    mean_calls = float(np.mean([report.S_star for report in reports]))
    return SpeedSummary(
        float(np.mean([report.L_star for report in reports])),
        mean_calls,
        tokens_per_step(mean_norm, mean_calls),
        float(np.mean([report.r_star for report in reports])),
    )


@dataclass
class SampleScores:
    """Quality row for a set of decoded samples.

    Attributes:
        mean_ppl (float): Mean oracle PPL over samples with content (NaN if none).
        inlier_rate (float): Share of samples within ``mu +- 2 sigma``.
        mean_log_prior (float): Mean over samples with content (NaN if none).
        zero_length (int): Samples without content.
        ppls (List[float]): Per-sample PPL (NaN for zero-length samples).
    """

    mean_ppl: float
    inlier_rate: float
    mean_log_prior: float
    zero_length: int
    ppls: List[float] = field(default_factory=list)


def sample_ppl(model: CorpusModel, prompt: Sequence[int], state: SequenceState) -> float:
    """Oracle PPL of a decoded window's response, with its EOS when one was produced."""
    start = len(prompt)
    response = content_tokens(state.tokens[start:], state.vocab)
    if not response:
        return math.nan
    if len(response) + start < state.L and state.tokens[start + len(response)] == state.vocab.eos_id:
        response = response + [state.vocab.eos_id]
    score = oracle_score(model, response, prompt)
    if score.zero_probability:
        logger.warning("Decoded sample contains a zero-probability transition")
    return score.ppl


def score_samples(
    model: CorpusModel,
    samples: Sequence[Tuple[Sequence[int], SequenceState]],
    prior: PriorTable,
    mu: float,
    sigma: float,
) -> SampleScores:
    """Scores ``(prompt, final window)`` pairs with the corpus oracle and the prior."""
    if not samples:
        raise DomainError("score_samples needs at least one sample")
    ppls, priors, empty = [], [], []
    for prompt, state in samples:
        ppl = sample_ppl(model, prompt, state)
        ppls.append(ppl)
        empty.append(math.isnan(ppl))
        if not math.isnan(ppl):
            priors.append(mean_log_prior(state.tokens[len(prompt) :], prior, state.vocab))
    valid = [ppl for ppl in ppls if not math.isnan(ppl)]
    return SampleScores(
        mean_ppl=float(np.mean(valid)) if valid else math.nan,
        inlier_rate=inlier_rate(ppls, mu, sigma, empty),
        mean_log_prior=float(np.mean(priors)) if priors else math.nan,
        zero_length=int(sum(empty)),
        ppls=ppls,
    )


# --- trace audit -----------------------------------------------------------------


@dataclass(frozen=True)
class TraceViolation:
    kind: str
    step: int
    position: Optional[int]
    message: str


def validate_trace(policy: DecodePolicy, trace: TraceLog) -> List[TraceViolation]:
    """Audits a trace against the structural rules of its policy.

    Checks unique absorbing events, replay against the final window, semi-AR block
    order, convolutional locality (sampled events outside completion steps), LLADA
    per-step counts, the EOS-fill rule and denoiser-call flags.

    Returns:
        List[TraceViolation]: Empty for a conforming trace.

    Example:
        ```python
        state, trace = decode(denoiser, prompt, policy, 64, 16, rng)
        assert validate_trace(policy, trace) == []
        ```
    """
    violations: List[TraceViolation] = []
    initial = trace.initial
    S = len(trace.steps)  # pylint: disable=invalid-name
    eos = initial.vocab.eos_id

    def flag(kind: str, step: int, position: Optional[int], message: str) -> None:
        violations.append(TraceViolation(kind, step, position, message))

    last_step = -1
    seen = set()
    for event in trace.events:
        if event.step < last_step:
            flag("order", event.step, event.position, "step indices decrease")
        last_step = max(last_step, event.step)
        if event.position in seen:
            flag("absorbing", event.step, event.position, "position unmasked twice")
        elif not initial.masked[event.position]:
            flag("absorbing", event.step, event.position, "position was not masked initially")
        seen.add(event.position)
        if event.origin is EventOrigin.FILL and event.token != eos:
            flag("eos_fill", event.step, event.position, "fill event with a non-EOS token")
    if violations:
        return violations

    replayed = replay_trace(trace)
    if trace.final is not None and not np.array_equal(replayed.tokens, trace.final.tokens):
        flag("replay", S, None, "replayed window differs from the final window")
    if replayed.masked.any():
        flag("incomplete", S, int(np.flatnonzero(replayed.masked)[0]), "masked slots remain after the last step")

    region = initial.generation_range()
    blocks = policy.block_ranges(*region) if S % policy.blocks == 0 else [region]
    block_steps = max(1, S // len(blocks))
    counts: List[int] = []

    state = initial.copy()
    for record in trace.steps:
        step = record.step
        events = trace.events_at(step)
        sampled = [event for event in events if event.origin is EventOrigin.SAMPLE]
        block = min(step // block_steps, len(blocks) - 1)
        final_step = step % block_steps == block_steps - 1
        start, end = blocks[block]
        eligible = int(state.masked[start:end].sum())
        if step % block_steps == 0:
            counts = transfer_counts(eligible, block_steps)

        if eligible == 0 and record.denoiser_call:
            flag("call", step, None, "denoiser called on a step without masked slots")
        if eligible and not policy.cache and not record.denoiser_call:
            flag("call", step, None, "denoiser call missing without caching")

        for event in sampled:
            if not start <= event.position < end or state.masked[:start].any():
                flag("semi_ar", step, event.position, f"event at position {event.position} while block {block} runs")

        if policy.conv is not None and policy.base is not BaseSampler.LLADA and not final_step:
            half = policy.conv.kernel // 2
            anchors = np.flatnonzero(state.unmasked)
            for event in sampled:
                if anchors.size == 0 or np.min(np.abs(anchors - event.position)) > half:
                    flag("conv", step, event.position, f"no unmasked slot within {half}")

        if policy.base is BaseSampler.LLADA and eligible:
            expected = eligible if final_step else min(max(1, counts[step % block_steps]), eligible)
            if len(sampled) != expected:
                flag("llada", step, None, f"{len(sampled)} unmasks, expected {expected}")

        for event in events:
            state.tokens[event.position] = event.token

        if policy.eos_fill:
            eos_positions = np.flatnonzero(state.tokens == eos)
            if eos_positions.size and state.masked[eos_positions[0] + 1 :].any():
                flag("eos_fill", step, int(eos_positions[0]), "masked slots remain right of the leftmost EOS")
    return violations
