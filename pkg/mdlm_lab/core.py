"""Vocabulary layout, noise schedule, decoding windows and the absorbing forward process."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from .common.errors import DomainError

ProbGrid = npt.NDArray[np.float64]
"""``L x V`` array of per-position categorical weights (V = content tokens + EOS)."""

Span = Tuple[int, int]


class VocabSpec(BaseModel):
    """Token id layout shared by every module.

    Content tokens occupy ``0 .. content_size - 1``; EOS is ``content_size``
    (the last entry of the prediction support), MASK is ``content_size + 1`` and
    PAD is ``content_size + 2``. Denoisers predict over ``content_size + 1``
    columns: MASK and PAD are never predicted.

    Attributes:
        content_size (int): Number of ordinary tokens.
        names (Optional[List[str]]): Optional display strings, one per predicted token.

    Example:
        ```python
        vocab = VocabSpec(content_size=64)
        assert vocab.eos_id == 64 and vocab.mask_id == 65 and vocab.pad_id == 66
        ```
    """

    model_config = ConfigDict(frozen=True)

    content_size: int = Field(ge=1)
    names: Optional[List[str]] = None

    @property
    def eos_id(self) -> int:
        return self.content_size

    @property
    def mask_id(self) -> int:
        return self.content_size + 1

    @property
    def pad_id(self) -> int:
        return self.content_size + 2

    @property
    def prediction_size(self) -> int:
        """Width ``V`` of a ProbGrid: content tokens plus EOS."""
        return self.content_size + 1

    @property
    def alphabet_size(self) -> int:
        return self.content_size + 3

    def is_content(self, token: int) -> bool:
        return 0 <= token < self.content_size

    def name(self, token: int) -> str:
        if token == self.eos_id:
            return "<eos>"
        if token == self.mask_id:
            return "<mask>"
        if token == self.pad_id:
            return "<pad>"
        if self.names and 0 <= token < len(self.names):
            return self.names[token]
        return f"t{token}"


class ScheduleKind(str, Enum):
    """Noise schedule families.

    **Enum Members**:
        - `LINEAR` ("linear")
    """

    LINEAR = "linear"

    def __str__(self):
        return self.value


class NoiseSchedule(BaseModel):
    """Discretized noise schedule ``alpha(t)`` on ``t = step / S``.

    Attributes:
        kind (ScheduleKind): Schedule family. Only ``linear`` (``alpha_t = 1 - t``).
        steps (int): Total number of reverse steps ``S``.
    """

    model_config = ConfigDict(frozen=True)

    kind: ScheduleKind = ScheduleKind.LINEAR
    steps: int = Field(ge=1)

    @property
    def dt(self) -> float:
        return 1.0 / self.steps


def _check_time(t: float) -> None:
    if not (0.0 <= t <= 1.0):  # also rejects NaN
        raise DomainError(f"t must lie in [0, 1], got {t}")


def schedule_alpha(sched: NoiseSchedule, t: float) -> float:
    """Signal level ``alpha_t``; 1 at ``t = 0`` and 0 at ``t = 1``.

    Raises:
        DomainError: If ``t`` is outside ``[0, 1]``.
    """
    _check_time(t)
    if sched.kind is ScheduleKind.LINEAR:
        return 1.0 - t
    raise DomainError(f"Unsupported schedule: {sched.kind}")


def _mask_level(sched: NoiseSchedule, t: float) -> float:
    # 1 - alpha_t, evaluated without cancellation for the linear rule.
    if sched.kind is ScheduleKind.LINEAR:
        return t
    return 1.0 - schedule_alpha(sched, t)


def unmask_multiplier(sched: NoiseSchedule, t: float) -> float:
    """The reverse-step factor ``dt / (1 - alpha_t)``.

    Under the linear schedule this is ``dt / t``: it grows as ``t`` shrinks and is
    exactly 1 at the final step ``t = dt``, which forces complete unmasking.

    Args:
        sched (NoiseSchedule): The schedule; ``dt = 1 / S``.
        t (float): Current time, a positive multiple of ``dt``.

    Returns:
        float: The multiplier applied to a row's mass to get its unmask probability.

    Raises:
        DomainError: If ``t`` is 0, outside ``(0, 1]`` or off the ``dt`` grid.

    Example:
        ```python
        sched = NoiseSchedule(steps=4)
        unmask_multiplier(sched, 0.5)  # 0.5
        unmask_multiplier(sched, 0.25)  # 1.0
        ```
    """
    _check_time(t)
    if t == 0.0:
        raise DomainError("The reverse process ends at t = dt; t = 0 has no multiplier")
    grid_index = t * sched.steps
    if abs(grid_index - round(grid_index)) > 1e-9:
        raise DomainError(f"t = {t} is not a multiple of dt = 1/{sched.steps}")
    return sched.dt / _mask_level(sched, t)


def reverse_times(sched: NoiseSchedule) -> List[float]:
    """Times visited by the reverse process: ``1, (S-1)/S, ..., 1/S``."""
    return [(sched.steps - k) / sched.steps for k in range(sched.steps)]


@dataclass
class SequenceState:
    """A fixed-length decoding window.

    Masked slots hold ``vocab.mask_id``. Positions inside ``prompt_spans`` are given
    context and are never Masked.

    Attributes:
        tokens (np.ndarray): Length-``L`` int64 array of token ids.
        vocab (VocabSpec): Id layout used to interpret ``tokens``.
        prompt_spans (List[Span]): Half-open ``(start, end)`` intervals of context.
        step_clock (int): Index of the next reverse step.
    """

    tokens: np.ndarray
    vocab: VocabSpec
    prompt_spans: List[Span] = field(default_factory=list)
    step_clock: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).copy()
        if self.tokens.ndim != 1:
            raise DomainError("A decoding window is one-dimensional")
        for start, end in self.prompt_spans:
            if not (0 <= start < end <= self.L):
                raise DomainError(f"Prompt span ({start}, {end}) does not fit in L={self.L}")
            if np.any(self.tokens[start:end] == self.vocab.mask_id):
                raise DomainError(f"Prompt span ({start}, {end}) contains Masked slots")

    @property
    def L(self) -> int:  # pylint: disable=invalid-name
        return int(self.tokens.shape[0])

    @property
    def masked(self) -> np.ndarray:
        return self.tokens == self.vocab.mask_id

    @property
    def unmasked(self) -> np.ndarray:
        return ~self.masked

    @property
    def prompt_mask(self) -> np.ndarray:
        mask = np.zeros(self.L, dtype=bool)
        for start, end in self.prompt_spans:
            mask[start:end] = True
        return mask

    def prompt_tokens(self) -> np.ndarray:
        return self.tokens[self.prompt_mask]

    def masked_count(self) -> int:
        return int(self.masked.sum())

    def generation_range(self) -> Span:
        """Returns the ``(start, end)`` region left between a leading prompt span and
        a trailing suffix span."""
        start, end = 0, self.L
        for span_start, span_end in self.prompt_spans:
            if span_start == 0:
                start = max(start, span_end)
            elif span_end == self.L:
                end = min(end, span_start)
        return start, max(start, end)

    def copy(self) -> "SequenceState":
        return SequenceState(self.tokens, self.vocab, list(self.prompt_spans), self.step_clock)

    @classmethod
    def from_prompt(
        cls,
        prompt: Sequence[int],
        L: int,  # pylint: disable=invalid-name
        vocab: VocabSpec,
        suffix: Optional[Sequence[int]] = None,
    ) -> "SequenceState":
        """Builds a window with the prompt at the left, an optional suffix span at
        the right (bidirectional decoding) and Masked slots in between.

        Raises:
            DomainError: If the prompt and suffix do not leave a masked slot.
        """
        suffix = list(suffix or [])
        if len(prompt) + len(suffix) >= L:
            raise DomainError(f"Prompt ({len(prompt)}) and suffix ({len(suffix)}) leave no room in L={L}")
        tokens = np.full(L, vocab.mask_id, dtype=np.int64)
        spans: List[Span] = []
        if prompt:
            tokens[: len(prompt)] = prompt
            spans.append((0, len(prompt)))
        if suffix:
            tokens[L - len(suffix) :] = suffix
            spans.append((L - len(suffix), L))
        return cls(tokens, vocab, spans)


def to_window(
    prompt: Sequence[int],
    response: Sequence[int],
    L: int,  # pylint: disable=invalid-name
    vocab: VocabSpec,
) -> SequenceState:
    """Serializes an example as ``prompt || response || EOS ... EOS`` of length ``L``.

    Raises:
        DomainError: If ``len(prompt) + len(response) + 1 > L``.
    """
    used = len(prompt) + len(response)
    if used + 1 > L:
        raise DomainError(f"Example of length {used} plus EOS does not fit in L={L}")
    tokens = np.full(L, vocab.eos_id, dtype=np.int64)
    tokens[: len(prompt)] = prompt
    tokens[len(prompt) : used] = response
    return SequenceState(tokens, vocab, [(0, len(prompt))])


def forward_mask(
    x0: SequenceState,
    t: float,
    rng: np.random.Generator,
    sched: Optional[NoiseSchedule] = None,
) -> SequenceState:
    """Absorbing forward process: every non-prompt position independently becomes
    Masked with probability ``1 - alpha_t``.

    Raises:
        DomainError: If ``x0`` has Masked slots or ``t`` is outside ``[0, 1]``.
    """
    if x0.masked.any():
        raise DomainError("forward_mask expects a fully tokenized window")
    sched = sched or NoiseSchedule(steps=1)
    p_mask = 1.0 - schedule_alpha(sched, t)
    hits = (rng.random(x0.L) < p_mask) & ~x0.prompt_mask
    out = x0.copy()
    out.tokens[hits] = x0.vocab.mask_id
    return out


def check_grid(grid: ProbGrid, vocab: VocabSpec, L: int, atol: float = 1e-9) -> None:  # pylint: disable=invalid-name
    """Validates a freshly produced ProbGrid: shape, nonnegativity and unit rows."""
    if grid.shape != (L, vocab.prediction_size):
        raise DomainError(f"Grid shape {grid.shape} != ({L}, {vocab.prediction_size})")
    if np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise DomainError("Grid has negative or non-finite entries")
    sums = grid.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol):
        worst = int(np.argmax(np.abs(sums - 1.0)))
        raise DomainError(f"Row {worst} sums to {sums[worst]!r}, not 1")


def log_floor(count: int) -> float:
    """Log-prior floor for zero-count tokens: ``ln(1 / (10 * count))``."""
    return -math.log(10.0 * max(count, 1))
