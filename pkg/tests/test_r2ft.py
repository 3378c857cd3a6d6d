import math

import numpy as np
import pytest

from mdlm_lab.common.errors import ConfigError, DomainError
from mdlm_lab.core import SequenceState, VocabSpec, to_window
from mdlm_lab.corpus import Example, compute_prior
from mdlm_lab.denoiser import DenoiserParams, EosMode, TrainConfig, train_sft
from mdlm_lab.r2ft import (
    CorruptionConfig,
    R2FTConfig,
    build_pair,
    corrupt,
    grad_r2ft,
    penalty_s,
    r2ft_loss,
    r2ft_objective,
    reject_term_grad,
    seq_logprob,
    train_r2ft,
    validation_losses,
)


class UniformDenoiser:
    def __init__(self, vocab):
        self.vocab = vocab

    def predict(self, state):
        return np.full((state.L, self.vocab.prediction_size), 1.0 / self.vocab.prediction_size)


def test_corrupt_repeats_the_last_unit():
    vocab = VocabSpec(content_size=8)
    example = Example((0, 1), (2, 3))
    cfg = CorruptionConfig(g_max=2, z_min=4, z_max=4, eos_insert=False)
    for seed in range(200):
        window = corrupt(example, 9, cfg, np.random.default_rng(seed), vocab)
        if (window.cut, window.unit) == (4, 2):
            break
    else:
        pytest.fail("no draw with cut 4 and unit 2")
    assert window.tokens.tolist() == [0, 1, 2, 3, 2, 3, 2, 3, vocab.pad_id]
    assert window.eos_position is None


def test_corrupt_structure(designed_model, designed_corpus):
    vocab = designed_model.vocab
    cfg = CorruptionConfig(g_max=5, z_min=2, z_max=10)
    rng = np.random.default_rng(0)
    for example in designed_corpus[:100]:
        window = corrupt(example, 64, cfg, rng, vocab)
        x0 = to_window(example.prompt, example.response, 64, vocab).tokens
        assert len(example.prompt) <= window.cut <= len(example.prompt) + len(example.response)
        assert 1 <= window.unit <= min(5, window.cut)
        assert 2 <= window.span <= 10
        assert np.array_equal(window.tokens[: window.cut], x0[: window.cut])
        assert np.all(window.tokens[window.end :] == vocab.pad_id)
        assert window.cut <= window.eos_position < window.end
        span = window.tokens[window.cut : window.end].copy()
        span[window.eos_position - window.cut] = -1
        expected = np.resize(x0[window.cut - window.unit : window.cut], window.span)
        assert all(a == -1 or a == b for a, b in zip(span, expected))


def test_corrupt_rejects_examples_without_room():
    vocab = VocabSpec(content_size=4)
    with pytest.raises(ConfigError):
        corrupt(Example((0,), (1, 2)), 8, CorruptionConfig(z_max=6), np.random.default_rng(0), vocab)


def test_corruption_config_validation():
    with pytest.raises(ValueError):
        CorruptionConfig(z_min=5, z_max=4)


def test_build_pair(designed_model, designed_corpus):
    vocab = designed_model.vocab
    cfg = CorruptionConfig(z_max=8)
    rng = np.random.default_rng(1)
    for example in designed_corpus[:30]:
        pair = build_pair(example, 64, cfg, rng, vocab)
        cut = int(pair.w_positions[0])
        assert pair.y_w[-1] == vocab.eos_id
        assert pair.context.masked[cut:].all() and not pair.context.masked[:cut].any()
        assert not np.array_equal(pair.y_w, pair.y_l)
        assert pair.l_positions[0] == cut


def test_seq_logprob_with_uniform_rows():
    vocab = VocabSpec(content_size=9)
    state = SequenceState.from_prompt([0], 6, vocab)
    logp = seq_logprob(UniformDenoiser(vocab), state, [1, 2, 3], [4, 5, 6])
    assert logp == pytest.approx(-6.9078, abs=1e-4)
    assert seq_logprob(UniformDenoiser(vocab), state, [], []) == 0.0


def test_seq_logprob_edge_cases():
    vocab = VocabSpec(content_size=9)
    state = SequenceState.from_prompt([0], 6, vocab)
    assert seq_logprob(UniformDenoiser(vocab), state, [1], [vocab.pad_id]) == -math.inf
    with pytest.raises(DomainError):
        seq_logprob(UniformDenoiser(vocab), state, [0], [1])


def test_penalty_s():
    assert penalty_s(-8.0, 4, -40.0, 4, 1.0) == pytest.approx(3.3535e-4, rel=1e-4)
    assert penalty_s(-2.0, 1, -math.inf, 3, 1.0) == 0.0
    assert penalty_s(-3.0, 3, -6.0, 6, 2.0) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        penalty_s(-1.0, 1, -1.0, 1, 0.0)


def test_r2ft_objective_values():
    assert r2ft_objective(-4.0, 2, -8.0, 4, 0.0, 1.0) == pytest.approx(math.log(2))
    assert r2ft_objective(-4.0, 2, -8.0, 4, 0.1, 1.0) == pytest.approx(0.8931, abs=1e-4)


def test_swapping_branches_costs_at_least_two_ln2():
    rng = np.random.default_rng(3)
    for _ in range(200):
        logp_w, logp_l = -rng.exponential(5.0, size=2)
        len_w, len_l = rng.integers(1, 10, size=2)
        beta = rng.uniform(0.1, 3.0)
        total = r2ft_objective(logp_w, len_w, logp_l, len_l, 0.0, beta) + r2ft_objective(
            logp_l, len_l, logp_w, len_w, 0.0, beta
        )
        assert total >= 2 * math.log(2) - 1e-12
    equal = r2ft_objective(-3.0, 3, -2.0, 2, 0.0, 1.0) * 2
    assert equal == pytest.approx(2 * math.log(2))


def _pair(seed):
    vocab = VocabSpec(content_size=4)
    rng = np.random.default_rng(seed)
    prompt = tuple(int(x) for x in rng.integers(0, 4, size=2))
    response = tuple(int(x) for x in rng.integers(0, 4, size=3))
    cfg = CorruptionConfig(g_max=3, z_min=2, z_max=4)
    params = DenoiserParams.random(vocab, rng, scale=0.5, radius=4)
    return params, build_pair(Example(prompt, response), 10, cfg, rng, vocab)


@pytest.mark.parametrize("seed", range(10))
def test_grad_r2ft_matches_finite_differences(seed):
    params, pair = _pair(seed)
    analytic = grad_r2ft(params, pair, gamma=0.1, beta=1.5)
    h = 1e-5
    for array, grad in ((params.bias, analytic.bias), (params.assoc, analytic.assoc)):
        for index in np.ndindex(array.shape):
            saved = array[index]
            array[index] = saved + h
            upper = r2ft_loss(params, pair, 0.1, 1.5)
            array[index] = saved - h
            lower = r2ft_loss(params, pair, 0.1, 1.5)
            array[index] = saved
            numeric = (upper - lower) / (2 * h)
            assert abs(grad[index] - numeric) <= 1e-4 * max(abs(grad[index]), abs(numeric)) + 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_reject_term_grad_is_the_margin_gradient(seed):
    params, pair = _pair(seed)
    expected = grad_r2ft(params, pair, gamma=0.0, beta=0.7)
    actual = reject_term_grad(params, pair, beta=0.7)
    assert np.allclose(actual.bias, expected.bias, atol=1e-10, rtol=0)
    assert np.allclose(actual.assoc, expected.assoc, atol=1e-10, rtol=0)


def test_validation_losses_are_uniform_nll():
    vocab = VocabSpec(content_size=4)
    pair = build_pair(Example((0, 1), (2, 3)), 10, CorruptionConfig(z_max=4), np.random.default_rng(0), vocab)
    loss_w, loss_l = validation_losses(UniformDenoiser(vocab), [pair])
    assert loss_w == pytest.approx(math.log(5)) and loss_l == pytest.approx(math.log(5))


def test_zero_steps_return_input(designed_model, designed_corpus):
    params = DenoiserParams.zeros(designed_model.vocab)
    trained, history = train_r2ft(params, designed_corpus, designed_model.vocab, R2FTConfig(steps=0))
    assert history.records == []
    assert np.array_equal(trained.assoc, params.assoc)


def test_train_r2ft_rejects_examples_without_room(vocab):
    corpus = [Example((0, 1), (2,) * 20)]
    config = R2FTConfig(steps=2, window=30, corruption=CorruptionConfig(z_max=16))
    with pytest.raises(ConfigError):
        train_r2ft(DenoiserParams.zeros(vocab), corpus, vocab, config)


def test_train_r2ft_records_checkpoints(designed_model, designed_corpus):
    vocab = designed_model.vocab
    prior = compute_prior(designed_corpus, vocab)
    config = R2FTConfig(
        steps=4, batch_size=2, eval_every=2, eval_size=4, sample_prompts=2, sample_steps=4, window=64, seed=5
    )
    _, history = train_r2ft(DenoiserParams.zeros(vocab), designed_corpus, vocab, config, prior)
    assert [r.step for r in history.records] == [0, 2, 4]
    first = history.records[0]
    assert first.loss_w == pytest.approx(math.log(vocab.prediction_size))
    assert all(math.isfinite(r.loss) for r in history.records)
    assert all(r.mean_log_prior <= 0.0 for r in history.records if not math.isnan(r.mean_log_prior))


@pytest.mark.slow
def test_r2ft_after_sft_pushes_the_repetition_branch_down(designed_model, designed_corpus):
    vocab = designed_model.vocab
    sft = TrainConfig(steps=600, learning_rate=8.0, window=64, eos_mode=EosMode.UPTO_FIRST_EOS, eval_every=200)
    params, _ = train_sft(DenoiserParams.zeros(vocab), designed_corpus, vocab, sft)
    config = R2FTConfig(steps=300, batch_size=8, eval_every=100, eval_size=32, sample_prompts=0, learning_rate=1.0)
    _, history = train_r2ft(params, designed_corpus, vocab, config)
    first, last = history.records[0], history.records[-1]
    assert [r.step for r in history.records] == [0, 100, 200, 300]
    assert last.loss < first.loss
    assert last.loss_l > first.loss_l
    assert last.loss_l - last.loss_w > first.loss_l - first.loss_w


def _reference_corrupt(example, L, cfg, rng, vocab):
    answer_end = len(example.prompt) + len(example.response)
    x0 = list(example.prompt) + list(example.response) + [vocab.eos_id] * (L - answer_end)
    cut = int(rng.integers(len(example.prompt), answer_end + 1))
    unit = int(rng.integers(1, cfg.g_max + 1))
    while unit > cut:
        unit = int(rng.integers(1, cfg.g_max + 1))
    span = int(rng.integers(cfg.z_min, cfg.z_max + 1))
    repeated = x0[cut - unit : cut]
    tokens = x0[:cut] + [repeated[i % unit] for i in range(span)]
    tokens += [vocab.pad_id] * (L - len(tokens))
    eos_position = None
    if cfg.eos_insert:
        eos_position = cut + int(rng.integers(span))
        tokens[eos_position] = vocab.eos_id
    return tokens, cut, unit, span, eos_position


def _reference_pair(example, L, cfg, rng, vocab):
    clean = list(example.prompt) + list(example.response) + [vocab.eos_id]
    while True:
        tokens, cut, _, span, _ = _reference_corrupt(example, L, cfg, rng, vocab)
        y_w, y_l = clean[cut:], tokens[cut : cut + span]
        if y_w != y_l:
            return cut, y_w, y_l


@pytest.mark.parametrize("eos_insert", [True, False])
def test_corrupt_matches_a_list_reference(designed_model, designed_corpus, eos_insert):
    vocab = designed_model.vocab
    cfg = CorruptionConfig(g_max=8, z_min=4, z_max=16, eos_insert=eos_insert)
    for seed in range(1000):
        example = designed_corpus[seed % len(designed_corpus)]
        window = corrupt(example, 64, cfg, np.random.default_rng(seed), vocab)
        expected = _reference_corrupt(example, 64, cfg, np.random.default_rng(seed), vocab)
        assert (window.tokens.tolist(), window.cut, window.unit, window.span, window.eos_position) == expected


def test_build_pair_matches_a_list_reference(designed_model, designed_corpus):
    vocab = designed_model.vocab
    cfg = CorruptionConfig(g_max=8, z_min=4, z_max=16)
    for seed in range(1000):
        example = designed_corpus[seed % len(designed_corpus)]
        pair = build_pair(example, 64, cfg, np.random.default_rng(seed), vocab)
        cut, y_w, y_l = _reference_pair(example, 64, cfg, np.random.default_rng(seed), vocab)
        prefix = list(example.prompt) + list(example.response) + [vocab.eos_id] * 64
        assert pair.context.tokens.tolist() == prefix[:cut] + [vocab.mask_id] * (64 - cut)
        assert pair.context.prompt_spans == [(0, len(example.prompt))]
        assert pair.y_w.tolist() == y_w and pair.w_positions.tolist() == list(range(cut, cut + len(y_w)))
        assert pair.y_l.tolist() == y_l and pair.l_positions.tolist() == list(range(cut, cut + len(y_l)))
