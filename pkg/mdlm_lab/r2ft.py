"""Preference fine-tuning against rule-generated repetition negatives.

A negative continuation repeats a short unit that ends at a random cut inside the
answer. The objective pairs a length-normalized likelihood term on the clean
continuation with a sigmoid margin between the two continuations.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ._utils.seeding import derive_seed, derived_rng
from .common.errors import ConfigError, DivergenceError, DomainError
from .core import SequenceState, VocabSpec, to_window
from .corpus import Example, PriorTable, split_corpus
from .decoding import BaseSampler, DecodePolicy, decode
from .denoiser import DenoiserParams, LinearDenoiser, logprob_and_grad, predict
from .metrics import content_tokens, mean_log_prior
from .protocols import Denoiser

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class CorruptionConfig(BaseModel):
    """Repetition corruption settings.

    Attributes:
        g_max (int): Longest repeated unit.
        z_min (int): Shortest repeated span.
        z_max (int): Longest repeated span.
        eos_insert (bool): Put one EOS at a random position of the span.
    """

    model_config = ConfigDict(frozen=True)

    g_max: int = Field(default=8, ge=1)
    z_min: int = Field(default=4, ge=1)
    z_max: int = Field(default=64, ge=1)
    eos_insert: bool = True

    @model_validator(mode="after")
    def _check_span(self) -> "CorruptionConfig":
        if self.z_min > self.z_max:
            raise ValueError("z_min must not exceed z_max")
        return self

    def check_example(self, example: Example, L: int) -> None:  # pylint: disable=invalid-name
        if len(example.prompt) + len(example.response) + self.z_max > L:
            raise ConfigError(
                f"Example of length {len(example.prompt) + len(example.response)} plus z_max={self.z_max} "
                f"does not fit in L={L}"
            )


@dataclass
class CorruptedWindow:
    """Output of ``corrupt``.

    Attributes:
        tokens (np.ndarray): Length-``L`` window: clean prefix, repeated span, PAD.
        cut (int): ``c``, where the clean prefix ends.
        unit (int): ``g``, the repeated unit length.
        span (int): ``z``, the repeated span length.
        eos_position (Optional[int]): Where EOS was inserted, if anywhere.
    """

    tokens: np.ndarray
    cut: int
    unit: int
    span: int
    eos_position: Optional[int] = None

    @property
    def end(self) -> int:
        return self.cut + self.span


def corrupt(
    example: Example,
    L: int,  # pylint: disable=invalid-name
    cfg: CorruptionConfig,
    rng: np.random.Generator,
    vocab: VocabSpec,
) -> CorruptedWindow:
    """Builds a repetition negative for one example.

    Draw order: ``c ~ U{L_Q, L_Q + L_A}``; ``g ~ U{1, g_max}``, redrawn while ``g > c``;
    ``z ~ U{z_min, z_max}``; then, with ``eos_insert``, the EOS offset ``~ U{0, z - 1}``.
    The window is ``x0[:c]`` followed by ``x0[c-g:c]`` repeated cyclically to length
    ``z``, then PAD.

    Raises:
        ConfigError: If ``L_Q + L_A + z_max > L``.
    """
    cfg.check_example(example, L)
    x0 = to_window(example.prompt, example.response, L, vocab).tokens
    answer_end = len(example.prompt) + len(example.response)
    cut = int(rng.integers(len(example.prompt), answer_end + 1))
    unit = int(rng.integers(1, cfg.g_max + 1))
    while unit > cut:
        unit = int(rng.integers(1, cfg.g_max + 1))
    span = int(rng.integers(cfg.z_min, cfg.z_max + 1))

    tokens = np.full(L, vocab.pad_id, dtype=np.int64)
    tokens[:cut] = x0[:cut]
    tokens[cut : cut + span] = np.resize(x0[cut - unit : cut], span)
    eos_position = None
    if cfg.eos_insert:
        eos_position = cut + int(rng.integers(span))
        tokens[eos_position] = vocab.eos_id
    return CorruptedWindow(tokens, cut, unit, span, eos_position)


@dataclass
class PreferencePair:
    """Shared context with a clean and a corrupted continuation.

    Attributes:
        context (SequenceState): ``x0[:c]`` unmasked, every slot from ``c`` on masked.
        w_positions (np.ndarray): Slots scored for ``y_w``.
        y_w (np.ndarray): Clean continuation, through the EOS that ends the answer.
        l_positions (np.ndarray): Slots scored for ``y_l``.
        y_l (np.ndarray): Corrupted continuation.
    """

    context: SequenceState
    w_positions: np.ndarray
    y_w: np.ndarray
    l_positions: np.ndarray
    y_l: np.ndarray

    @property
    def len_w(self) -> int:
        return int(self.y_w.shape[0])

    @property
    def len_l(self) -> int:
        return int(self.y_l.shape[0])


def build_pair(
    example: Example,
    L: int,  # pylint: disable=invalid-name
    cfg: CorruptionConfig,
    rng: np.random.Generator,
    vocab: VocabSpec,
) -> PreferencePair:
    """Draws corruptions until the negative differs from the clean continuation."""
    x0 = to_window(example.prompt, example.response, L, vocab)
    clean_end = len(example.prompt) + len(example.response) + 1
    while True:
        window = corrupt(example, L, cfg, rng, vocab)
        y_w = x0.tokens[window.cut : clean_end].copy()
        y_l = window.tokens[window.cut : window.end].copy()
        if not np.array_equal(y_w, y_l):
            break
    tokens = x0.tokens.copy()
    tokens[window.cut :] = vocab.mask_id
    context = SequenceState(tokens, vocab, [(0, len(example.prompt))])
    return PreferencePair(
        context,
        np.arange(window.cut, clean_end),
        y_w,
        np.arange(window.cut, window.end),
        y_l,
    )


def seq_logprob(denoiser: Denoiser, state: SequenceState, positions: Sequence[int], targets: Sequence[int]) -> float:
    """Sum of ``log grid[position, target]`` from a single denoiser call.

    Targets outside the prediction support score ``-inf``.

    Raises:
        DomainError: If a scored position is not masked.
    """
    positions = np.asarray(positions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if positions.size == 0:
        return 0.0
    if not state.masked[positions].all():
        raise DomainError("seq_logprob scores masked positions only")
    size = state.vocab.prediction_size
    if np.any((targets < 0) | (targets >= size)):
        logger.warning("Target outside the prediction support; scoring -inf")
        return -math.inf
    grid = denoiser.predict(state)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(grid[positions, targets])))


def _sigmoid(x: float) -> float:
    return float(np.exp(-np.logaddexp(0.0, -x)))


def penalty_s(logp_w: float, len_w: int, logp_l: float, len_l: int, beta: float) -> float:
    """``sigmoid(beta * (logp_l / len_l - logp_w / len_w))``; 0 when ``logp_l`` is ``-inf``."""
    if beta <= 0:
        raise DomainError(f"beta must be positive, got {beta}")
    return _sigmoid(beta * (logp_l / len_l - logp_w / len_w))


def r2ft_objective(logp_w: float, len_w: int, logp_l: float, len_l: int, gamma: float, beta: float) -> float:
    """``-(gamma/|w|) logp_w - log sigmoid(beta (logp_w/|w| - logp_l/|l|))``."""
    margin = beta * (logp_w / len_w - logp_l / len_l)
    return float(-(gamma / len_w) * logp_w + np.logaddexp(0.0, -margin))


def branch_logprobs(params: DenoiserParams, pair: PreferencePair) -> Tuple[float, float]:
    """``(log pi(y_w | x), log pi(y_l | x))`` from one forward pass."""
    grid = predict(params, pair.context)
    return (
        float(np.sum(np.log(grid[pair.w_positions, pair.y_w]))),
        float(np.sum(np.log(grid[pair.l_positions, pair.y_l]))),
    )


def r2ft_loss(params: DenoiserParams, pair: PreferencePair, gamma: float = 0.1, beta: float = 1.0) -> float:
    logp_w, logp_l = branch_logprobs(params, pair)
    return r2ft_objective(logp_w, pair.len_w, logp_l, pair.len_l, gamma, beta)


def r2ft_value_and_grad(
    params: DenoiserParams, pairs: Sequence[PreferencePair], gamma: float = 0.1, beta: float = 1.0
) -> Tuple[float, DenoiserParams]:
    """Mean loss over ``pairs`` and its analytic gradient.

    With ``s = penalty_s(...)``: ``dL/dlogp_w = -(gamma + s beta) / |w|`` and
    ``dL/dlogp_l = s beta / |l|``; both flow through one backward pass per pair.
    """
    if not pairs:
        raise DomainError("r2ft needs at least one pair")
    total = params.zeros_like()
    value = 0.0
    for pair in pairs:
        logp_w, logp_l = branch_logprobs(params, pair)
        value += r2ft_objective(logp_w, pair.len_w, logp_l, pair.len_l, gamma, beta) / len(pairs)
        s = penalty_s(logp_w, pair.len_w, logp_l, pair.len_l, beta)
        coef = np.concatenate(
            (
                np.full(pair.len_w, -(gamma + s * beta) / pair.len_w),
                np.full(pair.len_l, s * beta / pair.len_l),
            )
        ) / len(pairs)
        _, grad = logprob_and_grad(
            params,
            pair.context,
            np.concatenate((pair.w_positions, pair.l_positions)),
            np.concatenate((pair.y_w, pair.y_l)),
            coef,
        )
        total.bias += grad.bias
        total.assoc += grad.assoc
    return value, total


def grad_r2ft(params: DenoiserParams, pair: PreferencePair, gamma: float = 0.1, beta: float = 1.0) -> DenoiserParams:
    return r2ft_value_and_grad(params, [pair], gamma, beta)[1]


def reject_term_grad(params: DenoiserParams, pair: PreferencePair, beta: float = 1.0) -> DenoiserParams:
    """``-beta s (grad logp_w / |w| - grad logp_l / |l|)`` from separate per-branch gradients."""
    logp_w, grad_w = logprob_and_grad(params, pair.context, pair.w_positions, pair.y_w, np.ones(pair.len_w))
    logp_l, grad_l = logprob_and_grad(params, pair.context, pair.l_positions, pair.y_l, np.ones(pair.len_l))
    s = penalty_s(logp_w, pair.len_w, logp_l, pair.len_l, beta)
    return DenoiserParams(
        -beta * s * (grad_w.bias / pair.len_w - grad_l.bias / pair.len_l),
        -beta * s * (grad_w.assoc / pair.len_w - grad_l.assoc / pair.len_l),
        params.kernel,
        params.radius,
    )


def validation_losses(denoiser: Denoiser, pairs: Sequence[PreferencePair]) -> Tuple[float, float]:
    """Mean per-token negative log-likelihood of the clean and corrupted continuations."""
    if not pairs:
        raise DomainError("validation_losses needs at least one pair")
    loss_w, loss_l = [], []
    for pair in pairs:
        grid = denoiser.predict(pair.context)
        loss_w.append(-float(np.mean(np.log(grid[pair.w_positions, pair.y_w]))))
        loss_l.append(-float(np.mean(np.log(grid[pair.l_positions, pair.y_l]))))
    return float(np.mean(loss_w)), float(np.mean(loss_l))


class R2FTConfig(BaseModel):
    """Settings of the preference stage.

    Attributes:
        steps (int): SGD updates.
        learning_rate (float): Fixed step size.
        batch_size (int): Pairs per update.
        window (int): ``L``.
        gamma (float): Weight of the clean-continuation likelihood term.
        beta (float): Margin scale.
        corruption (CorruptionConfig): Negative construction.
        seed (int): Controls the split, pairs and samples.
        eval_every (int): Checkpoint interval.
        eval_size (int): Validation pairs.
        held_out_fraction (float): Share of the corpus used for validation.
        sample_prompts (int): Prompts decoded per checkpoint for the mean log prior.
        sample_steps (int): Decoding steps for those samples.
        top_k (int): Top-k of the sampling policy.
    """

    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=300, ge=0)
    learning_rate: float = Field(default=0.5, ge=0.0)
    batch_size: int = Field(default=8, ge=1)
    window: int = Field(default=64, ge=2)
    gamma: float = Field(default=0.1, ge=0.0)
    beta: float = Field(default=1.0, gt=0.0)
    corruption: CorruptionConfig = CorruptionConfig(z_max=16)
    seed: int = 0
    eval_every: int = Field(default=50, ge=1)
    eval_size: int = Field(default=64, ge=1)
    held_out_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    sample_prompts: int = Field(default=8, ge=0)
    sample_steps: int = Field(default=16, ge=1)
    top_k: int = Field(default=5, ge=1)


@dataclass
class R2FTRecord:
    step: int
    loss: float
    loss_w: float
    loss_l: float
    mean_log_prior: float


@dataclass
class R2FTHistory:
    records: List[R2FTRecord] = field(default_factory=list)

    HEADER = ("step", "loss", "loss_w", "loss_l", "mean_log_prior")

    def write_csv(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(self.HEADER)
            for r in self.records:
                writer.writerow([r.step, repr(r.loss), repr(r.loss_w), repr(r.loss_l), repr(r.mean_log_prior)])


def sampled_log_prior(
    params: DenoiserParams,
    vocab: VocabSpec,
    prompts: Sequence[Sequence[int]],
    prior: PriorTable,
    L: int,  # pylint: disable=invalid-name
    S: int,  # pylint: disable=invalid-name
    top_k: int,
    seed: int,
) -> float:
    """Mean log prior of top-k samples; the same seeds at every call."""
    denoiser = LinearDenoiser(params, vocab)
    policy = DecodePolicy(base=BaseSampler.TOPK_GLOB, top_k=min(top_k, vocab.prediction_size))
    values = []
    for index, prompt in enumerate(prompts):
        state, _ = decode(denoiser, prompt, policy, L, S, derived_rng(seed, index))
        response = state.tokens[len(prompt) :]
        if content_tokens(response, vocab):
            values.append(mean_log_prior(response, prior, vocab))
    return float(np.mean(values)) if values else math.nan


def train_r2ft(
    params: DenoiserParams,
    corpus: Sequence[Example],
    vocab: VocabSpec,
    config: R2FTConfig,
    prior: Optional[PriorTable] = None,
) -> Tuple[DenoiserParams, R2FTHistory]:
    """SGD on the preference objective with pairs built on the fly.

    Validation pairs are drawn once. Each checkpoint records the validation objective,
    the per-token NLL of both branches and, when ``prior`` is given, the mean log
    prior of top-k samples.

    Args:
        params (DenoiserParams): Usually SFT-trained parameters (not modified).
        corpus (Sequence[Example]): Examples; each must leave room for ``z_max``.
        vocab (VocabSpec): Id layout.
        config (R2FTConfig): Loop settings.
        prior (Optional[PriorTable]): Enables the mean-log-prior column.

    Returns:
        Tuple[DenoiserParams, R2FTHistory]: Updated parameters and checkpoint rows
        (empty for zero steps).

    Raises:
        ConfigError: If an example does not fit with ``z_max``.
        DivergenceError: If the validation objective runs away.
    """
    history = R2FTHistory()
    if config.steps == 0:
        return params.copy(), history
    if not corpus:
        raise DomainError("train_r2ft needs a nonempty corpus")
    L = config.window  # pylint: disable=invalid-name
    for example in corpus:
        config.corruption.check_example(example, L)

    rng = np.random.default_rng(config.seed)
    train, held_out = split_corpus(corpus, config.held_out_fraction, rng)
    eval_rng = derived_rng(config.seed, 1)
    eval_pairs = [
        build_pair(held_out[i % len(held_out)], L, config.corruption, eval_rng, vocab)
        for i in range(min(config.eval_size, len(held_out)))
    ]
    prompts = [list(held_out[i % len(held_out)].prompt) for i in range(config.sample_prompts)]

    def checkpoint(step: int, current: DenoiserParams) -> R2FTRecord:
        if not current.is_finite():
            return R2FTRecord(step, math.inf, math.inf, math.inf, math.nan)
        loss = r2ft_value_and_grad(current, eval_pairs, config.gamma, config.beta)[0]
        loss_w, loss_l = validation_losses(LinearDenoiser(current, vocab), eval_pairs)
        log_prior = math.nan
        if prior is not None and prompts:
            log_prior = sampled_log_prior(
                current, vocab, prompts, prior, L, config.sample_steps, config.top_k, derive_seed(config.seed, 2)
            )
        record = R2FTRecord(step, loss, loss_w, loss_l, log_prior)
        logger.info(
            "R2FT step %d: loss %.6f, L_w %.6f, L_l %.6f, mean log prior %.6f", step, loss, loss_w, loss_l, log_prior
        )
        return record

    current = params.copy()
    history.records.append(checkpoint(0, current))
    initial = history.records[0].loss
    runaway = 0
    for step in range(1, config.steps + 1):
        batch = [
            build_pair(train[int(i)], L, config.corruption, rng, vocab)
            for i in rng.integers(len(train), size=config.batch_size)
        ]
        _, grad = r2ft_value_and_grad(current, batch, config.gamma, config.beta)
        current = current.updated(grad, config.learning_rate)
        if step % config.eval_every and step != config.steps:
            continue
        record = checkpoint(step, current)
        history.records.append(record)
        runaway = runaway + 1 if not record.loss <= 10.0 * initial else 0
        if runaway >= 3:
            raise DivergenceError(
                f"R2FT validation loss {record.loss:.4g} exceeded 10x the initial {initial:.4g} "
                f"for 3 consecutive checkpoints (step {step})"
            )
    return current, history