"""Reverse-process samplers as one reweight-then-sample engine.

Each decoding step obtains a grid from the denoiser (or the cache), zeroes the
rows that may not unmask this step, applies the enabled modifiers in the fixed
order repetition penalty, top-k with global normalization, convolution, then
unmasks through the base sampler and finally applies EOS fill.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ._utils.errors import intercept_errors
from ._utils.seeding import derived_rng
from .common.errors import ConfigError, DomainError, ParseError
from .core import NoiseSchedule, ProbGrid, SequenceState, VocabSpec, unmask_multiplier
from .protocols import Denoiser

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class BaseSampler(str, Enum):
    """Base unmasking rule.

    **Enum Members**:
        - `CATEGORICAL` ("categorical"): independent per-position unmasking.
        - `TOPK_GLOB` ("topk_glob"): categorical over the top-k candidates, globally renormalized.
        - `LLADA` ("llada"): a fixed number of most confident positions per step.
    """

    CATEGORICAL = "categorical"
    TOPK_GLOB = "topk_glob"
    LLADA = "llada"

    def __str__(self):
        return self.value


class ConvActivation(str, Enum):
    """**Enum Members**:
    - `TANH` ("tanh")
    """

    TANH = "tanh"

    def __str__(self):
        return self.value


class Direction(str, Enum):
    """**Enum Members**:
    - `LEFT_CONTEXT` ("left_context"): prompt on the left only.
    - `BIDIRECTIONAL` ("bidirectional"): an extra anchor span at the right edge.
    """

    LEFT_CONTEXT = "left_context"
    BIDIRECTIONAL = "bidirectional"

    def __str__(self):
        return self.value


class ConvSettings(BaseModel):
    """Convolutional reweighting ``s_i = g(scale * u_i)``.

    Attributes:
        kernel (int): Even window width ``K``; neighbors within ``K / 2`` count.
        g (ConvActivation): Activation.
        scale (float): ``lambda``.
    """

    model_config = ConfigDict(frozen=True)

    kernel: int = Field(ge=2)
    g: ConvActivation = ConvActivation.TANH
    scale: float = Field(default=1.0, gt=0.0)

    @field_validator("kernel")
    @classmethod
    def _even_kernel(cls, value: int) -> int:
        if value % 2:
            raise ValueError("kernel size must be even")
        return value


class SemiARSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    blocks: int = Field(ge=1)


class RepPenaltySettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    factor: float = Field(gt=0.0, le=1.0)


class DecodePolicy(BaseModel):
    """One decoding configuration.

    Attributes:
        base (BaseSampler): Unmasking rule.
        top_k (Optional[int]): Candidates kept per row; required by ``topk_glob``.
        conv (Optional[ConvSettings]): Convolutional locality shaping.
        semi_ar (Optional[SemiARSettings]): Left-to-right blocks.
        eos_fill (bool): Fill everything right of a sampled EOS.
        cache (bool): Reuse the last grid while the window is unchanged.
        rep_penalty (Optional[RepPenaltySettings]): Down-weight tokens already in context.
        direction (Direction): Context layout.

    Example:
        ```python
        policy = DecodePolicy(base="topk_glob", top_k=5, conv=ConvSettings(kernel=8), eos_fill=True, cache=True)
        ```
    """

    model_config = ConfigDict(frozen=True)

    base: BaseSampler = BaseSampler.CATEGORICAL
    top_k: Optional[int] = Field(default=None, ge=1)
    conv: Optional[ConvSettings] = None
    semi_ar: Optional[SemiARSettings] = None
    eos_fill: bool = False
    cache: bool = False
    rep_penalty: Optional[RepPenaltySettings] = None
    direction: Direction = Direction.LEFT_CONTEXT

    @model_validator(mode="after")
    def _check_combination(self) -> "DecodePolicy":
        if self.conv is not None and self.semi_ar is not None:
            raise ValueError("conv and semi_ar are mutually exclusive")
        if self.eos_fill and self.direction is Direction.BIDIRECTIONAL:
            raise ValueError("eos_fill requires left_context decoding")
        if self.base is BaseSampler.TOPK_GLOB and self.top_k is None:
            raise ValueError("topk_glob needs top_k")
        return self

    @property
    def blocks(self) -> int:
        return self.semi_ar.blocks if self.semi_ar else 1

    def check_window(self, L: int, S: int, vocab: VocabSpec) -> None:  # pylint: disable=invalid-name
        """Checks the window-dependent invariants.

        Raises:
            ConfigError: If the block count does not divide ``L`` and ``S`` or ``top_k`` exceeds ``V``.
        """
        if L < 1 or S < 1:
            raise ConfigError(f"L and S must be positive, got L={L}, S={S}")
        if L % self.blocks or S % self.blocks:
            raise ConfigError(f"Block count {self.blocks} must divide L={L} and S={S}")
        if self.top_k is not None and self.top_k > vocab.prediction_size:
            raise ConfigError(f"top_k={self.top_k} exceeds the {vocab.prediction_size} predicted tokens")

    def block_ranges(self, start: int, end: int) -> List[Tuple[int, int]]:
        """Splits the generation region ``[start, end)`` into ``b`` contiguous blocks;
        leading blocks take one extra slot when the region does not divide evenly."""
        size, rem = divmod(max(0, end - start), self.blocks)
        ranges = []
        for m in range(self.blocks):
            stop = start + size + (1 if m < rem else 0)
            ranges.append((start, stop))
            start = stop
        return ranges


class EventOrigin(str, Enum):
    """**Enum Members**:
    - `SAMPLE` ("sample"): unmasked by the base sampler.
    - `FILL` ("fill"): set to EOS by EOS fill.
    """

    SAMPLE = "sample"
    FILL = "fill"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class UnmaskEvent:
    step: int
    position: int
    token: int
    origin: EventOrigin = EventOrigin.SAMPLE


@dataclass
class StepRecord:
    """Per-step bookkeeping.

    Attributes:
        step (int): Global step index.
        denoiser_call (bool): Whether the denoiser was evaluated.
        masked_before (Optional[int]): Masked slots eligible this step; unknown when read from CSV.
        clamped (Optional[int]): Positions whose unmask probability was clamped to 1.
    """

    step: int
    denoiser_call: bool
    masked_before: Optional[int] = None
    clamped: Optional[int] = None


@dataclass
class TraceLog:
    """Ordered unmask events of one decoding run.

    Attributes:
        initial (SequenceState): Window before the first step.
        events (List[UnmaskEvent]): Events in execution order.
        steps (List[StepRecord]): One record per step.
        final (Optional[SequenceState]): Window after the last step.
    """

    initial: SequenceState
    events: List[UnmaskEvent] = field(default_factory=list)
    steps: List[StepRecord] = field(default_factory=list)
    final: Optional[SequenceState] = None

    @property
    def denoiser_calls(self) -> int:
        return sum(1 for record in self.steps if record.denoiser_call)

    @property
    def clamped(self) -> int:
        return sum(record.clamped or 0 for record in self.steps)

    def events_at(self, step: int) -> List[UnmaskEvent]:
        return [event for event in self.events if event.step == step]

    def matrix(self) -> np.ndarray:
        """``L``-vector of the step at which each position unmasked (-1 for initial context)."""
        unmasked_at = np.full(self.initial.L, -1, dtype=np.int64)
        for event in self.events:
            unmasked_at[event.position] = event.step
        return unmasked_at


class StepResult(NamedTuple):
    state: SequenceState
    events: List[UnmaskEvent]
    clamped: int


# --- modifiers -------------------------------------------------------------------


def apply_topk_glob(grid: ProbGrid, k: int) -> np.ndarray:
    """Keeps the ``k`` largest entries per row and rescales them by one window-wide factor.

    Ties go to the lower token id. The factor ``total / kept`` restores the total mass
    of the grid, so the expected number of unmasks per step is unchanged.

    Example:
        ```python
        apply_topk_glob(np.array([[0.5, 0.3, 0.2], [0.4, 0.4, 0.2]]), 1)
        # [[1.1111, 0, 0], [0.8889, 0, 0]]
        ```
    """
    weights = np.asarray(grid, dtype=np.float64)
    if k < 1:
        raise DomainError(f"k must be at least 1, got {k}")
    if k >= weights.shape[1]:
        return weights.copy()
    keep = np.argsort(-weights, axis=1, kind="stable")[:, :k]
    kept = np.zeros_like(weights)
    np.put_along_axis(kept, keep, np.take_along_axis(weights, keep, axis=1), axis=1)
    kept_total = kept.sum()
    if kept_total == 0.0:
        return kept
    return kept * (weights.sum() / kept_total)


def neighbor_counts(unmasked: np.ndarray, K: int) -> np.ndarray:  # pylint: disable=invalid-name
    """``u_i``: unmasked slots in ``[i - K/2, i + K/2]`` clipped to the window."""
    length = unmasked.shape[0]
    half = K // 2
    prefix = np.concatenate(([0], np.cumsum(unmasked.astype(np.int64))))
    index = np.arange(length)
    return prefix[np.minimum(length, index + half + 1)] - prefix[np.maximum(0, index - half)]


def apply_conv(
    weights: np.ndarray,
    state: SequenceState,
    K: int,  # pylint: disable=invalid-name
    g: ConvActivation = ConvActivation.TANH,
    scale: float = 1.0,
) -> np.ndarray:
    """Scales row ``i`` by ``g(scale * u_i)`` and restores the total mass with one factor.

    A row without unmasked neighbors within ``K / 2`` becomes all-zero. If every row is
    blocked the result is all-zero.
    """
    if K < 2 or K % 2:
        raise DomainError(f"Kernel size must be even and at least 2, got {K}")
    weights = np.asarray(weights, dtype=np.float64)
    if g is ConvActivation.TANH:
        gate = np.tanh(scale * neighbor_counts(state.unmasked, K))
    else:
        raise ConfigError(f"Unsupported activation: {g}")
    shaped = weights * gate[:, None]
    shaped_total = shaped.sum()
    if shaped_total == 0.0:
        return shaped
    return shaped * (weights.sum() / shaped_total)


def context_tokens(state: SequenceState, prompt_tokens: Sequence[int]) -> np.ndarray:
    """Prompt tokens plus tokens already decoded, EOS excluded."""
    decoded = state.tokens[state.unmasked & ~state.prompt_mask]
    tokens = np.unique(np.concatenate((np.asarray(prompt_tokens, dtype=np.int64), decoded)))
    return tokens[(tokens != state.vocab.eos_id) & (tokens < state.vocab.prediction_size)]


def apply_rep_penalty(
    grid: np.ndarray, state: SequenceState, prompt_tokens: Sequence[int], factor: float
) -> np.ndarray:
    """Multiplies context tokens by ``factor`` and rescales each row back to its mass."""
    weights = np.asarray(grid, dtype=np.float64).copy()
    tokens = context_tokens(state, prompt_tokens)
    if tokens.size == 0 or factor == 1.0:
        return weights
    before = weights.sum(axis=1)
    weights[:, tokens] *= factor
    after = weights.sum(axis=1)
    rows = after > 0.0
    weights[rows] *= (before[rows] / after[rows])[:, None]
    return weights


def apply_eos_fill(state: SequenceState, step: int = 0) -> Tuple[SequenceState, List[UnmaskEvent]]:
    """Sets every masked slot right of the leftmost EOS to EOS.

    Committed tokens are never changed. Idempotent.
    """
    eos = np.flatnonzero(state.tokens == state.vocab.eos_id)
    if eos.size == 0:
        return state, []
    targets = np.flatnonzero(state.masked)
    targets = targets[targets > eos[0]]
    if targets.size == 0:
        return state, []
    out = state.copy()
    out.tokens[targets] = state.vocab.eos_id
    return out, [UnmaskEvent(step, int(pos), state.vocab.eos_id, EventOrigin.FILL) for pos in targets]


# --- base samplers ---------------------------------------------------------------


def _draw_tokens(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cumulative = np.cumsum(rows, axis=1)
    cumulative /= cumulative[:, -1:]
    draws = rng.random(rows.shape[0])
    return np.minimum((cumulative < draws[:, None]).sum(axis=1), rows.shape[1] - 1)


def step_categorical(
    state: SequenceState,
    weights: np.ndarray,
    t: float,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    active: Optional[np.ndarray] = None,
    fallback: Optional[np.ndarray] = None,
    step: int = 0,
) -> StepResult:
    """One reverse step of the categorical sampler.

    Each active masked position unmasks with probability
    ``min(1, multiplier * row_mass)``, drawing its token proportionally to the row.
    When the multiplier reaches 1 every active position unmasks; an all-zero row then
    draws from ``fallback`` (the raw denoiser row).

    Args:
        state (SequenceState): Current window.
        weights (np.ndarray): Possibly reweighted grid.
        t (float): Current time on the ``dt`` grid of ``sched``.
        sched (NoiseSchedule): Schedule of the running block.
        rng (np.random.Generator): Randomness.
        active (Optional[np.ndarray]): Slots allowed to unmask; defaults to all masked slots.
        fallback (Optional[np.ndarray]): Raw grid for the completion step.
        step (int): Step index stamped on the events.

    Returns:
        StepResult: New state, events in position order and the clamp count.
    """
    multiplier = unmask_multiplier(sched, t)
    active = state.masked if active is None else active & state.masked
    positions = np.flatnonzero(active)
    if positions.size == 0:
        return StepResult(state, [], 0)
    rows = np.asarray(weights, dtype=np.float64)[positions]
    mass = rows.sum(axis=1)
    clamped = int(np.sum(multiplier * mass > 1.0 + 1e-12))
    draws = rng.random(positions.size)
    if multiplier >= 1.0:
        chosen = np.ones(positions.size, dtype=bool)
        empty = mass <= 0.0
        if empty.any():
            source = fallback if fallback is not None else np.ones_like(np.asarray(weights))
            rows = rows.copy()
            rows[empty] = np.asarray(source, dtype=np.float64)[positions[empty]]
    else:
        chosen = draws < np.minimum(1.0, multiplier * mass)
    if not chosen.any():
        return StepResult(state, [], clamped)
    tokens = _draw_tokens(rows[chosen], rng)
    out = state.copy()
    out.tokens[positions[chosen]] = tokens
    events = [UnmaskEvent(step, int(pos), int(tok)) for pos, tok in zip(positions[chosen], tokens)]
    if clamped:
        logger.debug("Step %d clamped %d unmask probabilities to 1", step, clamped)
    return StepResult(out, events, clamped)


def step_llada(
    state: SequenceState,
    grid: np.ndarray,
    s: int,
    rng: Optional[np.random.Generator] = None,  # pylint: disable=unused-argument
    active: Optional[np.ndarray] = None,
    step: int = 0,
) -> StepResult:
    """Unmasks the ``s`` most confident active positions to their argmax token.

    Confidence is the row maximum; ties go to the lower position, argmax ties to the
    lower token id.
    """
    if s < 1:
        raise DomainError(f"s must be at least 1, got {s}")
    active = state.masked if active is None else active & state.masked
    positions = np.flatnonzero(active)
    if positions.size == 0:
        return StepResult(state, [], 0)
    rows = np.asarray(grid, dtype=np.float64)[positions]
    confidence = rows.max(axis=1)
    order = np.lexsort((positions, -confidence))[: min(s, positions.size)]
    chosen = np.sort(positions[order])
    tokens = np.asarray(grid, dtype=np.float64)[chosen].argmax(axis=1)
    out = state.copy()
    out.tokens[chosen] = tokens
    return StepResult(out, [UnmaskEvent(step, int(pos), int(tok)) for pos, tok in zip(chosen, tokens)], 0)


# --- decoding loop ---------------------------------------------------------------


def transfer_counts(masked: int, steps: int) -> List[int]:
    """Spreads ``masked`` unmasks over ``steps`` steps as evenly as possible, the
    remainder going to the earliest steps."""
    if steps < 1:
        raise DomainError(f"steps must be at least 1, got {steps}")
    base, rem = divmod(max(0, masked), steps)
    return [base + (1 if k < rem else 0) for k in range(steps)]


def reweight(
    grid: np.ndarray, state: SequenceState, active: np.ndarray, policy: DecodePolicy
) -> np.ndarray:
    """Zeroes inactive rows and applies the policy's modifiers in their fixed order."""
    weights = np.where(active[:, None], grid, 0.0)
    if policy.rep_penalty is not None:
        weights = apply_rep_penalty(weights, state, state.prompt_tokens(), policy.rep_penalty.factor)
    if policy.top_k is not None and policy.top_k < weights.shape[1]:
        weights = apply_topk_glob(weights, policy.top_k)
    if policy.conv is not None:
        weights = apply_conv(weights, state, policy.conv.kernel, policy.conv.g, policy.conv.scale)
    return weights


def decode(
    denoiser: Denoiser,
    prompt: Sequence[int],
    policy: DecodePolicy,
    L: int,  # pylint: disable=invalid-name
    S: int,  # pylint: disable=invalid-name
    rng: np.random.Generator,
    suffix: Optional[Sequence[int]] = None,
) -> Tuple[SequenceState, TraceLog]:
    """Runs the reverse process on one prompt.

    Semi-AR policies split the generation region between prompt and suffix into ``b``
    contiguous blocks decoded left to right, ``S / b`` steps each with a block-local
    clock. LLADA spreads the masked slots of a block evenly over its steps. A step without eligible masked slots
    makes no denoiser call. With ``cache`` the previous grid is reused as long as the
    window has not changed since it was computed.

    Args:
        denoiser (Denoiser): Shared read-only predictor.
        prompt (Sequence[int]): Left context.
        policy (DecodePolicy): Decoding configuration.
        L (int): Window length.
        S (int): Total step budget.
        rng (np.random.Generator): Randomness of this run.
        suffix (Optional[Sequence[int]]): Right anchor for bidirectional decoding;
            defaults to a single EOS.

    Returns:
        Tuple[SequenceState, TraceLog]: The final window and its trace.

    Raises:
        ConfigError: If the policy does not fit ``(L, S)`` or the vocabulary.

    Example:
        ```python
        state, trace = decode(denoiser, [3, 4, 5], DecodePolicy(eos_fill=True), 64, 16, np.random.default_rng(0))
        ```
    """
    vocab = denoiser.vocab
    policy.check_window(L, S, vocab)
    if policy.direction is Direction.BIDIRECTIONAL:
        suffix = list(suffix) if suffix else [vocab.eos_id]
    else:
        suffix = None
    state = SequenceState.from_prompt(list(prompt), L, vocab, suffix)
    trace = TraceLog(initial=state.copy())

    block_steps = S // policy.blocks
    block_sched = NoiseSchedule(steps=block_steps)
    cached: Optional[np.ndarray] = None
    step = 0
    for start, end in policy.block_ranges(*state.generation_range()):
        in_block = np.zeros(L, dtype=bool)
        in_block[start:end] = True
        counts = transfer_counts(int((state.masked & in_block).sum()), block_steps)
        for k in range(block_steps):
            active = state.masked & in_block
            masked_before = int(active.sum())
            if masked_before == 0:
                trace.steps.append(StepRecord(step, False, 0, 0))
                step += 1
                state.step_clock = step
                continue
            call = not (policy.cache and cached is not None)
            if call:
                cached = denoiser.predict(state)
            grid = cached
            weights = reweight(grid, state, active, policy)
            final_step = k == block_steps - 1
            if policy.base is BaseSampler.LLADA:
                count = masked_before if final_step else max(1, counts[k])
                result = step_llada(state, weights, count, rng, active, step)
            else:
                t = (block_steps - k) / block_steps
                result = step_categorical(state, weights, t, block_sched, rng, active, grid, step)
            state, events = result.state, list(result.events)
            if policy.eos_fill:
                state, filled = apply_eos_fill(state, step)
                events.extend(filled)
            if events or not policy.cache:
                cached = None
            trace.events.extend(events)
            trace.steps.append(StepRecord(step, call, masked_before, result.clamped))
            step += 1
            state.step_clock = step
    trace.final = state.copy()
    logger.debug("Decoded L=%d S=%d with %d denoiser calls", L, S, trace.denoiser_calls)
    return state, trace


def decode_batch(
    denoiser: Denoiser,
    prompts: Sequence[Sequence[int]],
    policy: DecodePolicy,
    L: int,  # pylint: disable=invalid-name
    S: int,  # pylint: disable=invalid-name
    seed: int,
    jobs: int = 1,
) -> List[Tuple[SequenceState, TraceLog]]:
    """Decodes many prompts; run ``i`` uses the seed derived from ``(seed, i)``.

    Results come back in prompt order whatever ``jobs`` is.
    """

    def run(index: int) -> Tuple[SequenceState, TraceLog]:
        return decode(denoiser, prompts[index], policy, L, S, derived_rng(seed, index))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        return list(executor.map(run, range(len(prompts))))


# --- trace files and audits ------------------------------------------------------

TRACE_HEADER = ("step", "position", "token", "denoiser_call", "origin")
SUMMARY_ORIGIN = "step"


@intercept_errors(message_prefix="Failed to write trace: ")
def write_trace_csv(path: PathLike, trace: TraceLog) -> None:
    """One summary row per step (empty position and token) followed by its events."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        by_step = {}
        for event in trace.events:
            by_step.setdefault(event.step, []).append(event)
        for record in trace.steps:
            call = int(record.denoiser_call)
            writer.writerow([record.step, "", "", call, SUMMARY_ORIGIN])
            for event in by_step.get(record.step, []):
                writer.writerow([event.step, event.position, event.token, call, str(event.origin)])


@intercept_errors(message_prefix="Failed to read trace: ")
def read_trace_csv(path: PathLike, initial: SequenceState) -> TraceLog:
    """Reads a trace written by ``write_trace_csv`` and replays it onto ``initial``."""
    trace = TraceLog(initial=initial.copy())
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if tuple(header or ()) != TRACE_HEADER:
            raise ParseError(f"line 1: expected header {','.join(TRACE_HEADER)}")
        for number, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_HEADER):
                raise ParseError(f"line {number}: expected {len(TRACE_HEADER)} fields")
            step, position, token, call, origin = row
            try:
                if origin == SUMMARY_ORIGIN:
                    trace.steps.append(StepRecord(int(step), bool(int(call))))
                else:
                    trace.events.append(UnmaskEvent(int(step), int(position), int(token), EventOrigin(origin)))
            except ValueError as e:
                raise ParseError(f"line {number}: {e}") from None
    trace.final = replay_trace(trace)
    return trace


def replay_trace(trace: TraceLog) -> SequenceState:
    """Applies the events to the initial window.

    Raises:
        DomainError: If an event targets a slot that is not masked.
    """
    state = trace.initial.copy()
    for event in trace.events:
        if not state.masked[event.position]:
            raise DomainError(f"Event at step {event.step} targets committed position {event.position}")
        state.tokens[event.position] = event.token
    state.step_clock = len(trace.steps)
    return state
