"""Per-position predictors over content tokens + EOS and the SFT training loop.

Two denoisers implement :class:`mdlm_lab.protocols.Denoiser`:

* :class:`LinearDenoiser` scores every position with
  ``bias[v] + sum_j kappa(|i - j|) * assoc[token_j, v]`` over unmasked ``j``
  within radius ``R``, followed by a softmax. Gradients are analytic.
* :class:`OracleDenoiser` returns the exact posterior of the corpus chain given
  the nearest unmasked neighbors.

Neither takes a time input.
"""

import csv
import functools
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ._utils.enum import to_enum
from ._utils.errors import intercept_errors
from ._utils.seeding import derived_rng
from .common.errors import ConfigError, DivergenceError, DomainError, EnumerationError, VersionError
from .core import NoiseSchedule, ProbGrid, SequenceState, VocabSpec, forward_mask, to_window
from .corpus import CorpusModel, Example, split_corpus

logger = logging.getLogger(__name__)

PARAMS_VERSION = "mdlm-lab-params/1"

PathLike = Union[str, Path]


class KernelKind(str, Enum):
    """Distance kernels for the linear denoiser.

    **Enum Members**:
        - `INVERSE` ("inverse"): ``kappa(d) = 1 / (1 + d)``
    """

    INVERSE = "inverse"

    def __str__(self):
        return self.value


@functools.lru_cache(maxsize=64)
def kernel_matrix(L: int, kind: KernelKind, radius: int) -> np.ndarray:  # pylint: disable=invalid-name
    """``L x L`` matrix ``K[i, j] = kappa(|i - j|)`` for ``0 < |i - j| <= radius``, else 0."""
    distance = np.abs(np.subtract.outer(np.arange(L), np.arange(L)))
    if kind is KernelKind.INVERSE:
        matrix = 1.0 / (1.0 + distance)
    else:
        raise ConfigError(f"Unsupported kernel: {kind}")
    matrix[(distance == 0) | (distance > radius)] = 0.0
    matrix.setflags(write=False)
    return matrix


@dataclass
class DenoiserParams:
    """Trainable parameters; gradients use the same type.

    Attributes:
        bias (np.ndarray): Length-``V`` context-free logits.
        assoc (np.ndarray): ``V x V`` source-token to target-token affinities.
        kernel (KernelKind): Distance kernel.
        radius (int): Kernel radius cap ``R``.
    """

    bias: np.ndarray
    assoc: np.ndarray
    kernel: KernelKind = KernelKind.INVERSE
    radius: int = 8

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.assoc = np.asarray(self.assoc, dtype=np.float64)
        self.kernel = to_enum(KernelKind, self.kernel, "kernel")
        size = self.bias.shape[0]
        if self.bias.ndim != 1 or self.assoc.shape != (size, size):
            raise ConfigError(f"bias {self.bias.shape} and assoc {self.assoc.shape} do not agree")
        if self.radius < 1:
            raise ConfigError(f"Kernel radius must be at least 1, got {self.radius}")

    @property
    def size(self) -> int:
        return int(self.bias.shape[0])

    @classmethod
    def zeros(cls, vocab: VocabSpec, radius: int = 8, kernel: KernelKind = KernelKind.INVERSE) -> "DenoiserParams":
        size = vocab.prediction_size
        return cls(np.zeros(size), np.zeros((size, size)), kernel, radius)

    @classmethod
    def random(
        cls, vocab: VocabSpec, rng: np.random.Generator, scale: float = 0.1, radius: int = 8
    ) -> "DenoiserParams":
        size = vocab.prediction_size
        return cls(scale * rng.standard_normal(size), scale * rng.standard_normal((size, size)), radius=radius)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.bias.copy(), self.assoc.copy(), self.kernel, self.radius)

    def zeros_like(self) -> "DenoiserParams":
        return DenoiserParams(np.zeros_like(self.bias), np.zeros_like(self.assoc), self.kernel, self.radius)

    def updated(self, grad: "DenoiserParams", learning_rate: float) -> "DenoiserParams":
        """One SGD step ``theta - learning_rate * grad``."""
        return DenoiserParams(
            self.bias - learning_rate * grad.bias,
            self.assoc - learning_rate * grad.assoc,
            self.kernel,
            self.radius,
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.bias)) and np.all(np.isfinite(self.assoc)))


def _context(params: DenoiserParams, state: SequenceState) -> Tuple[np.ndarray, np.ndarray]:
    if state.vocab.prediction_size != params.size:
        raise ConfigError(f"Parameters cover {params.size} tokens, vocabulary predicts {state.vocab.prediction_size}")
    positions = np.flatnonzero(state.unmasked)
    if positions.size == 0:
        raise DomainError("Cannot predict without any unmasked position or prompt")
    tokens = state.tokens[positions]
    if np.any(tokens >= params.size):
        raise DomainError("Decoding windows may only hold content tokens, EOS or MASK")
    return positions, tokens


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def predict(params: DenoiserParams, state: SequenceState) -> ProbGrid:
    """Evaluates the linear denoiser on every position of a window.

    Args:
        params (DenoiserParams): Model parameters.
        state (SequenceState): Window with at least one unmasked slot.

    Returns:
        ProbGrid: ``L x V`` grid of row-normalized probabilities.

    Raises:
        DomainError: If every slot is masked.
        ConfigError: If the parameters do not match the vocabulary.
    """
    positions, tokens = _context(params, state)
    weights = kernel_matrix(state.L, params.kernel, params.radius)[:, positions]
    return _softmax(params.bias[None, :] + weights @ params.assoc[tokens])


def logprob_and_grad(
    params: DenoiserParams,
    state: SequenceState,
    positions: np.ndarray,
    targets: np.ndarray,
    coef: np.ndarray,
) -> Tuple[float, DenoiserParams]:
    """Value and gradient of ``sum_k coef_k * log p[positions_k, targets_k]``.

    Every loss in the package is a weighted sum of target log-probabilities under
    one forward pass, so this is the only backward pass.
    """
    grad = params.zeros_like()
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return 0.0, grad
    targets = np.asarray(targets, dtype=np.int64)
    coef = np.asarray(coef, dtype=np.float64)
    context, tokens = _context(params, state)
    weights = kernel_matrix(state.L, params.kernel, params.radius)[:, context]
    probs = _softmax(params.bias[None, :] + weights @ params.assoc[tokens])

    value = float(np.sum(coef * np.log(probs[positions, targets])))
    delta = np.zeros_like(probs)
    np.add.at(delta, positions, -coef[:, None] * probs[positions])
    np.add.at(delta, (positions, targets), coef)
    grad.bias = delta.sum(axis=0)
    np.add.at(grad.assoc, tokens, weights.T @ delta)
    return value, grad


class LinearDenoiser:
    """Linear association denoiser bound to a vocabulary.

    Example:
        ```python
        vocab = VocabSpec(content_size=32)
        denoiser = LinearDenoiser(DenoiserParams.zeros(vocab), vocab)
        grid = denoiser.predict(SequenceState.from_prompt([1, 2], 16, vocab))
        ```
    """

    def __init__(self, params: DenoiserParams, vocab: VocabSpec):
        if params.size != vocab.prediction_size:
            raise ConfigError(f"Parameters cover {params.size} tokens, vocabulary predicts {vocab.prediction_size}")
        self.params = params
        self.vocab = vocab

    def predict(self, state: SequenceState) -> ProbGrid:
        return predict(self.params, state)


class PosteriorMethod(str, Enum):
    """How the oracle denoiser computes gap posteriors.

    **Enum Members**:
        - `FORWARD_BACKWARD` ("forward_backward")
        - `ENUMERATE` ("enumerate")
    """

    FORWARD_BACKWARD = "forward_backward"
    ENUMERATE = "enumerate"

    def __str__(self):
        return self.value


class OracleDenoiser:
    """Exact posterior of each masked slot under the corpus chain.

    By the Markov property a masked slot depends only on the nearest unmasked
    token on each side. A gap without a left neighbor starts from the uniform
    distribution over content tokens; a gap without a right neighbor is
    unconstrained on that side. Unmasked rows are one-hot on their token.

    After a leading prompt the posterior is also conditioned on the response being
    kept by generation: the first response slot is not EOS and EOS is reached within
    ``max_response_len`` tokens, inside the window or past its right end.

    Args:
        model (CorpusModel): The corpus process; the chain is ``M_P`` for the
            window's leading prompt span.
        method (PosteriorMethod): ``forward_backward`` (any gap length) or
            ``enumerate`` (brute force over all gap fillings).
        max_enumeration_gap (int): Longest gap ``enumerate`` accepts.
    """

    def __init__(
        self,
        model: CorpusModel,
        method: PosteriorMethod = PosteriorMethod.FORWARD_BACKWARD,
        max_enumeration_gap: int = 6,
    ):
        self.model = model
        self.vocab = model.vocab
        self.method = to_enum(PosteriorMethod, method, "method")
        self.max_enumeration_gap = max_enumeration_gap

    def predict(self, state: SequenceState) -> ProbGrid:
        size = self.vocab.prediction_size
        tokens = state.tokens
        masked = state.masked
        if np.any(tokens[~masked] >= size):
            raise DomainError("Decoding windows may only hold content tokens, EOS or MASK")
        prompt: Sequence[int] = ()
        if state.prompt_spans and state.prompt_spans[0][0] == 0:
            start, end = state.prompt_spans[0]
            prompt = tokens[start:end].tolist()
        chain = self.model.chain(prompt)
        evidence, tail = self._acceptance_evidence(prompt, state.L)

        grid = np.zeros((state.L, size))
        grid[np.flatnonzero(~masked), tokens[~masked]] = 1.0
        for start, end in _gaps(masked):
            left = int(tokens[start - 1]) if start > 0 else None
            right = chain[:, int(tokens[end])] if end < state.L else tail
            weights = evidence[start:end]
            if self.method is PosteriorMethod.ENUMERATE:
                grid[start:end] = self._enumerate(chain, left, right, weights)
            else:
                grid[start:end] = self._forward_backward(chain, left, right, weights)
        return grid

    def _acceptance_evidence(
        self, prompt: Sequence[int], L: int  # pylint: disable=invalid-name
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Per-slot likelihood weights and the weight past the right end of the window."""
        size = self.vocab.prediction_size
        evidence = np.ones((L, size))
        tail = np.ones(size)
        if not prompt or len(prompt) >= L:
            return evidence, tail
        eos = self.vocab.eos_id
        _, reach = self.model.acceptance(prompt)
        first, last = len(prompt), len(prompt) + self.model.max_response_len
        evidence[first, eos] = 0.0
        if last < L:
            evidence[last, :eos] = 0.0
        else:
            tail = reach[last - (L - 1)].copy()
        return evidence, tail

    def _start(self, chain: np.ndarray, left: Optional[int]) -> np.ndarray:
        if left is not None:
            return chain[left].copy()
        start = np.zeros(chain.shape[0])
        start[: self.vocab.content_size] = 1.0 / self.vocab.content_size
        return start

    def _forward(
        self, chain: np.ndarray, left: Optional[int], n: int, weights: Optional[np.ndarray] = None
    ) -> np.ndarray:
        forward = np.empty((n, chain.shape[0]))
        step = self._start(chain, left)
        for k in range(n):
            if k:
                step = forward[k - 1] @ chain
            if weights is not None:
                step = step * weights[k]
            forward[k] = step / max(step.sum(), np.finfo(float).tiny)
        return forward

    def _forward_backward(
        self, chain: np.ndarray, left: Optional[int], right: np.ndarray, weights: np.ndarray
    ) -> np.ndarray:
        n, size = weights.shape
        forward = self._forward(chain, left, n, weights)
        backward = np.empty((n, size))
        backward[n - 1] = right
        for k in range(n - 2, -1, -1):
            step = chain @ (weights[k + 1] * backward[k + 1])
            backward[k] = step / max(step.max(), np.finfo(float).tiny)
        return _normalize_rows(forward * backward, fallback=lambda: self._forward(chain, left, n))

    def _enumerate(self, chain: np.ndarray, left: Optional[int], right: np.ndarray, weights: np.ndarray) -> np.ndarray:
        n, size = weights.shape
        if n > self.max_enumeration_gap:
            raise EnumerationError(f"Gap of length {n} exceeds the enumeration bound {self.max_enumeration_gap}")
        start = self._start(chain, left)
        marginals = np.zeros((n, size))
        for path in itertools.product(range(size), repeat=n):
            weight = start[path[0]] * weights[0, path[0]]
            for k, (a, b) in enumerate(zip(path, path[1:]), start=1):
                weight *= chain[a, b] * weights[k, b]
            weight *= right[path[-1]]
            if weight > 0.0:
                marginals[np.arange(n), path] += weight
        return _normalize_rows(marginals, fallback=lambda: self._forward(chain, left, n))


def _gaps(masked: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal runs of masked slots as half-open intervals."""
    padded = np.concatenate(([False], masked, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def _normalize_rows(rows: np.ndarray, fallback: Callable[[], np.ndarray]) -> np.ndarray:
    sums = rows.sum(axis=1, keepdims=True)
    impossible = sums[:, 0] <= 0.0
    if impossible.any():
        # Context with zero probability under the chain; fall back to the forward marginal.
        logger.debug("Oracle posterior undefined at %d slots; using forward marginals", int(impossible.sum()))
        rows = rows.copy()
        rows[impossible] = fallback()[impossible]
        sums = rows.sum(axis=1, keepdims=True)
    return rows / sums


# --- objective -------------------------------------------------------------------


@dataclass
class NoisyWindow:
    """One training item: a clean window, its masked version and the time it was masked at.

    Attributes:
        x0 (SequenceState): Fully tokenized window.
        noisy (SequenceState): ``forward_mask(x0, t)``.
        t (float): Masking time on the ``dt`` grid.
        targets (Optional[np.ndarray]): Boolean mask of positions that may be scored;
            ``None`` scores every masked slot.
    """

    x0: SequenceState
    noisy: SequenceState
    t: float
    targets: Optional[np.ndarray] = None

    def target_positions(self) -> np.ndarray:
        eligible = self.noisy.masked
        if self.targets is not None:
            eligible = eligible & self.targets
        return np.flatnonzero(eligible)


def nelbo_weight(sched: NoiseSchedule, t: float) -> float:
    """Discretized NELBO weight ``(alpha_{t-dt} - alpha_t) / (1 - alpha_t)``; ``dt / t`` here."""
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    return sched.dt / t


def nelbo_loss(
    params: DenoiserParams,
    x0: SequenceState,
    t: float,
    masked_state: SequenceState,
    sched: NoiseSchedule,
    targets: Optional[np.ndarray] = None,
) -> float:
    """``w_t`` times the cross-entropy summed over masked positions.

    Example:
        ```python
        loss = nelbo_loss(params, x0, 0.5, forward_mask(x0, 0.5, rng), NoiseSchedule(steps=4))
        ```
    """
    item = NoisyWindow(x0, masked_state, t, targets)
    positions = item.target_positions()
    if positions.size == 0:
        return 0.0
    probs = predict(params, masked_state)
    return -nelbo_weight(sched, t) * float(np.sum(np.log(probs[positions, x0.tokens[positions]])))


def nelbo_value_and_grad(
    params: DenoiserParams, batch: Sequence[NoisyWindow], sched: NoiseSchedule, scale: float = 1.0
) -> Tuple[float, DenoiserParams]:
    """Mean NELBO over a batch (times ``scale``) and its gradient."""
    if not batch:
        raise DomainError("grad_nelbo needs a nonempty batch")
    total = params.zeros_like()
    value = 0.0
    for item in batch:
        positions = item.target_positions()
        coef = np.full(positions.size, -nelbo_weight(sched, item.t) * scale / len(batch))
        part, grad = logprob_and_grad(params, item.noisy, positions, item.x0.tokens[positions], coef)
        value += part
        total.bias += grad.bias
        total.assoc += grad.assoc
    return value, total


def grad_nelbo(params: DenoiserParams, batch: Sequence[NoisyWindow], sched: NoiseSchedule) -> DenoiserParams:
    """Analytic gradient of the mean ``nelbo_loss`` over ``batch``."""
    return nelbo_value_and_grad(params, batch, sched)[1]


# --- supervised fine-tuning ------------------------------------------------------


class EosMode(str, Enum):
    """What the SFT loss sees beyond the answer.

    **Enum Members**:
        - `FULL_FILL` ("full_fill"): the whole EOS fill is context and target.
        - `UPTO_FIRST_EOS` ("upto_first_eos"): only up to the EOS that follows the
          answer; later slots are neither context nor target.
    """

    FULL_FILL = "full_fill"
    UPTO_FIRST_EOS = "upto_first_eos"

    def __str__(self):
        return self.value


class TrainConfig(BaseModel):
    """SFT settings.

    Attributes:
        steps (int): SGD updates.
        learning_rate (float): Fixed step size (0 leaves parameters unchanged).
        batch_size (int): Windows per update.
        window (int): Window length ``L``.
        schedule_steps (int): ``S``; masking times are drawn uniformly from ``{1/S, ..., 1}``.
        seed (int): Controls the split, batches and masks.
        eval_every (int): Held-out checkpoint interval in steps.
        held_out_fraction (float): Share of the corpus held out.
        eval_size (int): Held-out windows scored per checkpoint.
        eos_mode (EosMode): Loss extent beyond the answer.
        normalize_by_length (bool): Divide the loss by ``L``.
    """

    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=500, ge=0)
    learning_rate: float = Field(default=0.5, ge=0.0)
    batch_size: int = Field(default=8, ge=1)
    window: int = Field(default=64, ge=2)
    schedule_steps: int = Field(default=16, ge=1)
    seed: int = 0
    eval_every: int = Field(default=50, ge=1)
    held_out_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    eval_size: int = Field(default=64, ge=1)
    eos_mode: EosMode = EosMode.FULL_FILL
    normalize_by_length: bool = True


@dataclass
class TrainRecord:
    step: int
    train_loss: float
    held_out_loss: float


@dataclass
class TrainHistory:
    records: List[TrainRecord] = field(default_factory=list)

    HEADER = ("step", "train_loss", "held_out_loss")

    def write_csv(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(self.HEADER)
            for record in self.records:
                writer.writerow([record.step, repr(record.train_loss), repr(record.held_out_loss)])


def answer_extent(example: Example, L: int, mode: EosMode) -> Optional[np.ndarray]:  # pylint: disable=invalid-name
    """Positions the loss may use, or ``None`` for the whole window."""
    if mode is EosMode.FULL_FILL:
        return None
    extent = np.zeros(L, dtype=bool)
    extent[: len(example.prompt) + len(example.response) + 1] = True
    return extent


def draw_noisy_window(
    example: Example,
    vocab: VocabSpec,
    sched: NoiseSchedule,
    L: int,  # pylint: disable=invalid-name
    mode: EosMode,
    rng: np.random.Generator,
) -> NoisyWindow:
    """Masks one example at a grid time drawn uniformly from ``{1/S, ..., 1}``."""
    x0 = to_window(example.prompt, example.response, L, vocab)
    t = int(rng.integers(1, sched.steps + 1)) / sched.steps
    noisy = forward_mask(x0, t, rng, sched)
    extent = answer_extent(example, L, mode)
    if extent is not None:
        noisy.tokens[~extent] = vocab.mask_id
    return NoisyWindow(x0, noisy, t, extent)


def train_sft(
    params: DenoiserParams,
    corpus: Sequence[Example],
    vocab: VocabSpec,
    config: TrainConfig,
) -> Tuple[DenoiserParams, TrainHistory]:
    """Plain SGD on the discretized NELBO.

    A fixed held-out batch (drawn once) is scored at every checkpoint; training aborts
    when the held-out loss exceeds ten times its initial value at three consecutive
    checkpoints.

    Args:
        params (DenoiserParams): Starting parameters (not modified).
        corpus (Sequence[Example]): Training examples; each must fit in ``config.window``.
        vocab (VocabSpec): Id layout.
        config (TrainConfig): Loop settings.

    Returns:
        Tuple[DenoiserParams, TrainHistory]: Trained parameters and checkpoint rows.

    Raises:
        DomainError: If the corpus is empty or an example does not fit the window.
        DivergenceError: If the held-out loss runs away.
    """
    if not corpus:
        raise DomainError("train_sft needs a nonempty corpus")
    sched = NoiseSchedule(steps=config.schedule_steps)
    L = config.window  # pylint: disable=invalid-name
    scale = 1.0 / L if config.normalize_by_length else 1.0
    rng = np.random.default_rng(config.seed)
    train, held_out = split_corpus(corpus, config.held_out_fraction, rng)

    eval_rng = derived_rng(config.seed, 1)
    eval_batch = [
        draw_noisy_window(held_out[i % len(held_out)], vocab, sched, L, config.eos_mode, eval_rng)
        for i in range(min(config.eval_size, max(len(held_out), 1)))
    ]

    def held_out_loss(current: DenoiserParams) -> float:
        return nelbo_value_and_grad(current, eval_batch, sched, scale)[0]

    history = TrainHistory()
    initial = held_out_loss(params)
    history.records.append(TrainRecord(0, math.nan, initial))
    logger.info("SFT start: held-out loss %.6f on %d windows", initial, len(eval_batch))

    current = params.copy()
    runaway = 0
    for step in range(1, config.steps + 1):
        batch = [
            draw_noisy_window(train[int(i)], vocab, sched, L, config.eos_mode, rng)
            for i in rng.integers(len(train), size=config.batch_size)
        ]
        value, grad = nelbo_value_and_grad(current, batch, sched, scale)
        current = current.updated(grad, config.learning_rate)
        if step % config.eval_every and step != config.steps:
            continue
        loss = held_out_loss(current) if current.is_finite() else math.inf
        history.records.append(TrainRecord(step, value, loss))
        logger.info("SFT step %d: train loss %.6f, held-out loss %.6f", step, value, loss)
        runaway = runaway + 1 if not loss <= 10.0 * initial else 0
        if runaway >= 3:
            raise DivergenceError(
                f"Held-out loss {loss:.4g} exceeded 10x the initial {initial:.4g} for 3 consecutive "
                f"checkpoints (step {step}, learning rate {config.learning_rate})"
            )
    return current, history


# --- persistence -----------------------------------------------------------------


@intercept_errors(message_prefix="Failed to save parameters: ")
def save_params(path: PathLike, params: DenoiserParams) -> None:
    """Writes parameters as JSON; floats use the shortest repr that round-trips exactly."""
    payload = {
        "version": PARAMS_VERSION,
        "V": params.size,
        "bias": params.bias.tolist(),
        "assoc": params.assoc.tolist(),
        "kernel": str(params.kernel),
        "R": params.radius,
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8", newline="\n")


@intercept_errors(message_prefix="Failed to load parameters: ")
def load_params(path: PathLike, vocab: Optional[VocabSpec] = None) -> DenoiserParams:
    """Reads parameters written by ``save_params``.

    Raises:
        VersionError: If the version differs.
        ParseError: If arrays are malformed or non-finite.
        ConfigError: If ``vocab`` is given and its size disagrees with ``V``.
    """
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != PARAMS_VERSION:
        raise VersionError(f"version {payload.get('version')!r} is not supported (expected {PARAMS_VERSION!r})")
    size = int(payload["V"])
    bias = np.asarray(payload["bias"], dtype=np.float64)
    assoc = np.asarray(payload["assoc"], dtype=np.float64)
    if bias.shape != (size,) or assoc.shape != (size, size):
        raise ValueError(f"arrays do not match V={size}")
    if not (np.all(np.isfinite(bias)) and np.all(np.isfinite(assoc))):
        raise ValueError("non-finite parameter values")
    if vocab is not None and vocab.prediction_size != size:
        raise ConfigError(f"Parameter file has V={size}, vocabulary predicts {vocab.prediction_size}")
    return DenoiserParams(bias, assoc, to_enum(KernelKind, payload["kernel"], "kernel"), int(payload["R"]))
