import numpy as np
import pytest

from mdlm_lab.common.errors import DomainError
from mdlm_lab.core import (
    NoiseSchedule,
    SequenceState,
    VocabSpec,
    check_grid,
    forward_mask,
    log_floor,
    reverse_times,
    schedule_alpha,
    to_window,
    unmask_multiplier,
)


def test_vocab_layout():
    vocab = VocabSpec(content_size=64)
    assert (vocab.eos_id, vocab.mask_id, vocab.pad_id) == (64, 65, 66)
    assert vocab.prediction_size == 65
    assert vocab.alphabet_size == 67
    assert vocab.is_content(63) and not vocab.is_content(64)
    assert vocab.name(64) == "<eos>" and vocab.name(3) == "t3"


@pytest.mark.parametrize("t, expected", [(0.0, 1.0), (1.0, 0.0), (0.25, 0.75)])
def test_schedule_alpha(t, expected):
    assert schedule_alpha(NoiseSchedule(steps=8), t) == expected


@pytest.mark.parametrize("t", [-0.01, 1.01, float("nan")])
def test_schedule_alpha_rejects_out_of_range(t):
    with pytest.raises(DomainError):
        schedule_alpha(NoiseSchedule(steps=8), t)


def test_schedule_alpha_nonincreasing():
    sched = NoiseSchedule(steps=8)
    values = [schedule_alpha(sched, t) for t in np.linspace(0.0, 1.0, 1000)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_unmask_multiplier_examples():
    assert unmask_multiplier(NoiseSchedule(steps=128), 1.0) == pytest.approx(0.0078125)
    assert unmask_multiplier(NoiseSchedule(steps=128), 1 / 128) == 1.0
    assert unmask_multiplier(NoiseSchedule(steps=4), 0.5) == 0.5


def test_unmask_multiplier_errors():
    sched = NoiseSchedule(steps=4)
    with pytest.raises(DomainError):
        unmask_multiplier(sched, 0.0)
    with pytest.raises(DomainError):
        unmask_multiplier(sched, 0.3)


def test_reverse_times_end_at_dt():
    sched = NoiseSchedule(steps=16)
    times = reverse_times(sched)
    multipliers = [unmask_multiplier(sched, t) for t in times]
    assert times[0] == 1.0 and times[-1] == sched.dt
    assert multipliers[-1] == 1.0
    assert sum(multipliers) >= 1.0
    assert all(a < b for a, b in zip(multipliers, multipliers[1:]))


def test_forward_mask_boundaries(vocab, rng):
    x0 = to_window([0, 1], [2, 3, 2], 12, vocab)
    assert np.array_equal(forward_mask(x0, 0.0, rng).tokens, x0.tokens)
    masked = forward_mask(x0, 1.0, rng)
    assert masked.masked.tolist() == [False, False] + [True] * 10


def test_forward_mask_keeps_prompt_and_is_binomial(rng):
    vocab = VocabSpec(content_size=4)
    x0 = to_window([1], [2] * 10_000, 10_002, vocab)
    out = forward_mask(x0, 0.5, rng)
    assert out.tokens[0] == 1
    count = int(out.masked.sum())
    # central 99.9% of Binomial(10001, 0.5): +- 3.29 sd
    assert abs(count - 10_001 * 0.5) <= 3.3 * np.sqrt(10_001 * 0.25)


def test_forward_mask_monotone_in_t():
    vocab = VocabSpec(content_size=4)
    x0 = to_window([1], [2] * 30, 40, vocab)
    rng = np.random.default_rng(5)
    low = np.mean([forward_mask(x0, 0.3, rng).masked_count() for _ in range(1000)])
    high = np.mean([forward_mask(x0, 0.6, rng).masked_count() for _ in range(1000)])
    assert high > low


def test_forward_mask_rejects_masked_input(vocab, rng):
    state = SequenceState.from_prompt([1], 4, vocab)
    with pytest.raises(DomainError):
        forward_mask(state, 0.5, rng)


def test_from_prompt_with_suffix(vocab):
    state = SequenceState.from_prompt([0, 1], 6, vocab, suffix=[vocab.eos_id])
    assert state.prompt_spans == [(0, 2), (5, 6)]
    assert state.masked.tolist() == [False, False, True, True, True, False]
    assert state.prompt_tokens().tolist() == [0, 1, vocab.eos_id]


def test_from_prompt_without_room(vocab):
    with pytest.raises(DomainError):
        SequenceState.from_prompt([0, 1, 2], 3, vocab)


def test_prompt_span_cannot_hold_masks(vocab):
    with pytest.raises(DomainError):
        SequenceState(np.array([vocab.mask_id, 0]), vocab, [(0, 1)])


def test_to_window_fills_eos(vocab):
    state = to_window([0], [1, 2], 6, vocab)
    assert state.tokens.tolist() == [0, 1, 2, 4, 4, 4]
    with pytest.raises(DomainError):
        to_window([0], [1, 2], 3, vocab)


def test_check_grid(vocab):
    check_grid(np.full((3, 5), 0.2), vocab, 3)
    with pytest.raises(DomainError):
        check_grid(np.full((3, 5), 0.3), vocab, 3)
    with pytest.raises(DomainError):
        check_grid(np.full((2, 5), 0.2), vocab, 3)


def test_log_floor():
    assert log_floor(10) == pytest.approx(np.log(1 / 100))
