import json
import math

import numpy as np
import pytest

from mdlm_lab.common.errors import ConfigError, DivergenceError, DomainError, EnumerationError, VersionError
from mdlm_lab.core import NoiseSchedule, SequenceState, VocabSpec, forward_mask, to_window
from mdlm_lab.corpus import Example, generate_corpus
from mdlm_lab.denoiser import (
    DenoiserParams,
    EosMode,
    KernelKind,
    LinearDenoiser,
    NoisyWindow,
    OracleDenoiser,
    PosteriorMethod,
    TrainConfig,
    answer_extent,
    draw_noisy_window,
    grad_nelbo,
    kernel_matrix,
    load_params,
    nelbo_loss,
    predict,
    save_params,
    train_sft,
)

from .conftest import chain_model


def _state(tokens, vocab, prompt_len=0):
    spans = [(0, prompt_len)] if prompt_len else []
    return SequenceState(np.asarray(tokens, dtype=np.int64), vocab, spans)


def test_kernel_matrix():
    matrix = kernel_matrix(5, KernelKind.INVERSE, 2)
    assert matrix[0, 0] == 0.0
    assert matrix[0, 1] == 0.5
    assert matrix[3, 1] == pytest.approx(1 / 3)
    assert matrix[0, 3] == 0.0
    assert np.array_equal(matrix, matrix.T)


def test_zero_assoc_predicts_softmax_of_bias(vocab, rng):
    params = DenoiserParams.zeros(vocab)
    params.bias[:] = rng.standard_normal(vocab.prediction_size)
    state = SequenceState.from_prompt([0, 1], 6, vocab)
    grid = predict(params, state)
    expected = np.exp(params.bias) / np.exp(params.bias).sum()
    assert np.allclose(grid, np.tile(expected, (6, 1)), atol=1e-15)


def test_predict_matches_hand_computation():
    vocab = VocabSpec(content_size=2)
    bias = np.array([0.1, -0.2, 0.3])
    assoc = np.array([[0.5, -1.0, 0.2], [1.5, 0.0, -0.7], [0.3, 0.3, 0.3]])
    params = DenoiserParams(bias, assoc)
    mask = vocab.mask_id
    grid = predict(params, _state([0, mask, 1], vocab))
    for i, context in enumerate([[(2, 1)], [(1, 0), (1, 1)], [(2, 0)]]):
        logits = bias + sum(assoc[token] / (1 + d) for d, token in context)
        expected = np.exp(logits) / np.exp(logits).sum()
        assert grid[i] == pytest.approx(expected, rel=1e-12)


def test_predict_rows_are_distributions(vocab, rng):
    params = DenoiserParams.random(vocab, rng, scale=2.0)
    x0 = to_window([0, 1], [2, 3, 0], 16, vocab)
    grid = predict(params, forward_mask(x0, 0.7, rng))
    assert grid.shape == (16, vocab.prediction_size)
    assert np.all(grid >= 0.0)
    assert np.allclose(grid.sum(axis=1), 1.0, atol=1e-12)


def test_predict_is_translation_covariant(vocab, rng):
    params = DenoiserParams.random(vocab, rng, scale=1.0, radius=3)
    mask = vocab.mask_id
    first = np.full(40, mask)
    first[[10, 12]] = [1, 3]
    second = np.full(40, mask)
    second[[20, 22]] = [1, 3]
    grid_a = predict(params, _state(first, vocab))
    grid_b = predict(params, _state(second, vocab))
    assert np.allclose(grid_a[11], grid_b[21], atol=1e-12)
    assert np.allclose(grid_a[8], grid_b[18], atol=1e-12)


def test_predict_needs_context(vocab):
    params = DenoiserParams.zeros(vocab)
    with pytest.raises(DomainError):
        predict(params, _state([vocab.mask_id] * 4, vocab))


def test_linear_denoiser_checks_vocab(vocab):
    with pytest.raises(ConfigError):
        LinearDenoiser(DenoiserParams.zeros(VocabSpec(content_size=7)), vocab)


def test_nelbo_with_uniform_prediction():
    vocab = VocabSpec(content_size=9)
    params = DenoiserParams.zeros(vocab)
    x0 = to_window([0], [1], 3, vocab)
    masked = _state([0, vocab.mask_id, vocab.eos_id], vocab, prompt_len=1)
    loss = nelbo_loss(params, x0, 0.5, masked, NoiseSchedule(steps=4))
    assert loss == pytest.approx(1.1513, abs=1e-4)


def test_nelbo_without_masks_is_zero(vocab):
    params = DenoiserParams.zeros(vocab)
    x0 = to_window([0], [1, 2], 5, vocab)
    assert nelbo_loss(params, x0, 0.5, x0, NoiseSchedule(steps=4)) == 0.0


def test_nelbo_of_confident_correct_prediction_vanishes(vocab):
    params = DenoiserParams.zeros(vocab)
    params.bias[2] = 60.0
    x0 = to_window([0], [2], 3, vocab)
    masked = _state([0, vocab.mask_id, vocab.eos_id], vocab, prompt_len=1)
    assert 0.0 <= nelbo_loss(params, x0, 1.0, masked, NoiseSchedule(steps=4)) < 1e-12


def _mean_loss(params, batch, sched):
    return float(np.mean([nelbo_loss(params, w.x0, w.t, w.noisy, sched) for w in batch]))


def _numeric_grad(params, batch, sched, h=1e-5):
    grad = params.zeros_like()
    for array, target in ((params.bias, grad.bias), (params.assoc, grad.assoc)):
        for index in np.ndindex(array.shape):
            saved = array[index]
            array[index] = saved + h
            upper = _mean_loss(params, batch, sched)
            array[index] = saved - h
            lower = _mean_loss(params, batch, sched)
            array[index] = saved
            target[index] = (upper - lower) / (2 * h)
    return grad


def _assert_close_grads(analytic, numeric):
    for a, n in zip(
        np.concatenate([analytic.bias, analytic.assoc.ravel()]),
        np.concatenate([numeric.bias, numeric.assoc.ravel()]),
    ):
        assert abs(a - n) <= 1e-4 * max(abs(a), abs(n)) + 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_grad_nelbo_matches_finite_differences(seed):
    vocab = VocabSpec(content_size=3)
    rng = np.random.default_rng(seed)
    params = DenoiserParams.random(vocab, rng, scale=0.5, radius=3)
    sched = NoiseSchedule(steps=4)
    batch = []
    for t in (1.0, 0.5):
        response = rng.integers(0, 3, size=4).tolist()
        x0 = to_window([int(rng.integers(0, 3))], response, 8, vocab)
        batch.append(NoisyWindow(x0, forward_mask(x0, t, rng, sched), t))
    _assert_close_grads(grad_nelbo(params, batch, sched), _numeric_grad(params, batch, sched))


def test_grad_nelbo_is_linear_in_the_batch(vocab, rng):
    params = DenoiserParams.random(vocab, rng, scale=0.3)
    sched = NoiseSchedule(steps=4)
    x0 = to_window([0], [1, 2, 3], 8, vocab)
    first = NoisyWindow(x0, forward_mask(x0, 1.0, rng), 1.0)
    second = NoisyWindow(x0, forward_mask(x0, 0.5, rng), 0.5)
    both = grad_nelbo(params, [first, second], sched)
    one = grad_nelbo(params, [first], sched)
    two = grad_nelbo(params, [second], sched)
    assert np.allclose(both.bias, (one.bias + two.bias) / 2, atol=1e-14)
    assert np.allclose(both.assoc, (one.assoc + two.assoc) / 2, atol=1e-14)


def test_zero_assoc_bias_gradient(vocab, rng):
    params = DenoiserParams.zeros(vocab)
    params.bias[:] = [0.2, -0.1, 0.0, 0.4, 0.1]
    sched = NoiseSchedule(steps=4)
    x0 = to_window([0], [1, 2], 5, vocab)
    noisy = _state([0, vocab.mask_id, 2, vocab.mask_id, vocab.eos_id], vocab, prompt_len=1)
    grad = grad_nelbo(params, [NoisyWindow(x0, noisy, 0.5)], sched)
    p = np.exp(params.bias) / np.exp(params.bias).sum()
    empirical = np.zeros(5)
    empirical[[1, vocab.eos_id]] = 1.0
    assert np.allclose(grad.bias, 0.5 * (2 * p - empirical), atol=1e-14)


def test_oracle_posterior_between_neighbors(small_model):
    vocab = small_model.vocab
    mask = vocab.mask_id
    state = _state([0, 1, mask, 2, mask], vocab, prompt_len=2)
    grid = OracleDenoiser(small_model).predict(state)
    chain = small_model.chain([0, 1])
    expected = chain[1] * chain[:, 2]
    assert grid[2] == pytest.approx(expected / expected.sum(), rel=1e-12)
    assert grid[3].tolist() == [0.0, 0.0, 1.0, 0.0]
    _, reach = small_model.acceptance([0, 1])
    tail = chain[2] * reach[2 + small_model.max_response_len - 4]
    assert grid[4] == pytest.approx(tail / tail.sum(), rel=1e-12)


def test_oracle_conditions_on_the_length_bound():
    model = chain_model(1, [[0.9, 0.1]], [[0]], max_response_len=3)
    eos = model.vocab.eos_id
    state = SequenceState.from_prompt([0], 8, model.vocab)
    for method in PosteriorMethod:
        grid = OracleDenoiser(model, method, max_enumeration_gap=7).predict(state)
        assert grid[1, eos] == 0.0
        assert grid[2, eos] == pytest.approx(0.1 / (1 - 0.9**3), rel=1e-12)
        assert grid[3, eos] == pytest.approx(0.19 / (1 - 0.9**3), rel=1e-12)
        assert grid[4:, eos].tolist() == [1.0] * 4


def test_oracle_conditions_past_the_window_end():
    model = chain_model(1, [[0.9, 0.1]], [[0]], max_response_len=5)
    eos = model.vocab.eos_id
    state = SequenceState.from_prompt([0], 4, model.vocab)
    for method in PosteriorMethod:
        grid = OracleDenoiser(model, method).predict(state)
        assert grid[1].tolist() == [1.0, 0.0]
        assert grid[2, eos] == pytest.approx(0.1 / (1 - 0.9**5), rel=1e-12)


def test_oracle_on_deterministic_chain(deterministic_model):
    vocab = deterministic_model.vocab
    grid = OracleDenoiser(deterministic_model).predict(SequenceState.from_prompt([0], 5, vocab))
    assert np.array_equal(grid.argmax(axis=1), [0, 1, 2, vocab.eos_id, vocab.eos_id])
    assert np.array_equal(grid.max(axis=1), np.ones(5))


def test_oracle_without_left_neighbor_starts_uniform(small_model):
    vocab = small_model.vocab
    grid = OracleDenoiser(small_model).predict(_state([vocab.mask_id] * 3, vocab))
    assert grid[0] == pytest.approx([1 / 3, 1 / 3, 1 / 3, 0.0])


def test_oracle_methods_agree(small_model):
    vocab = small_model.vocab
    rng = np.random.default_rng(3)
    exact = OracleDenoiser(small_model, PosteriorMethod.FORWARD_BACKWARD)
    brute = OracleDenoiser(small_model, "enumerate")
    for example in generate_corpus(small_model, 20, rng):
        if len(example.prompt) + len(example.response) >= 7:
            continue
        x0 = to_window(example.prompt, example.response, 7, vocab)
        noisy = forward_mask(x0, 0.6, rng)
        assert np.allclose(exact.predict(noisy), brute.predict(noisy), atol=1e-12)


def test_oracle_enumeration_bound(small_model):
    oracle = OracleDenoiser(small_model, PosteriorMethod.ENUMERATE, max_enumeration_gap=3)
    with pytest.raises(EnumerationError):
        oracle.predict(SequenceState.from_prompt([2], 6, small_model.vocab))


def test_answer_extent():
    example = Example((0, 1), (2,))
    assert answer_extent(example, 6, EosMode.FULL_FILL) is None
    assert answer_extent(example, 6, EosMode.UPTO_FIRST_EOS).tolist() == [True] * 4 + [False] * 2


def test_upto_first_eos_hides_the_tail(vocab, rng):
    window = draw_noisy_window(Example((0,), (1,)), vocab, NoiseSchedule(steps=4), 6, EosMode.UPTO_FIRST_EOS, rng)
    assert window.noisy.tokens[3:].tolist() == [vocab.mask_id] * 3
    assert set(window.target_positions().tolist()) <= {1, 2}


def test_zero_learning_rate_keeps_params(deterministic_model, rng):
    corpus = generate_corpus(deterministic_model, 20, rng)
    params = DenoiserParams.random(deterministic_model.vocab, rng)
    config = TrainConfig(steps=5, learning_rate=0.0, window=6, eval_every=2)
    trained, history = train_sft(params, corpus, deterministic_model.vocab, config)
    assert np.array_equal(trained.bias, params.bias)
    assert np.array_equal(trained.assoc, params.assoc)
    assert [r.step for r in history.records] == [0, 2, 4, 5]
    assert math.isnan(history.records[0].train_loss)


def test_train_sft_is_seeded(deterministic_model, rng):
    corpus = generate_corpus(deterministic_model, 20, rng)
    vocab = deterministic_model.vocab
    config = TrainConfig(steps=10, learning_rate=0.5, window=6, seed=4)
    first, _ = train_sft(DenoiserParams.zeros(vocab), corpus, vocab, config)
    second, _ = train_sft(DenoiserParams.zeros(vocab), corpus, vocab, config)
    assert np.array_equal(first.assoc, second.assoc)


def test_train_sft_detects_divergence(deterministic_model, rng):
    corpus = generate_corpus(deterministic_model, 20, rng)
    vocab = deterministic_model.vocab
    config = TrainConfig(steps=20, learning_rate=1e6, window=6, eval_every=1, normalize_by_length=False)
    with pytest.raises(DivergenceError):
        train_sft(DenoiserParams.zeros(vocab), corpus, vocab, config)


def test_train_sft_rejects_empty_corpus(vocab):
    with pytest.raises(DomainError):
        train_sft(DenoiserParams.zeros(vocab), [], vocab, TrainConfig())


@pytest.mark.slow
def test_training_learns_a_deterministic_answer():
    vocab = VocabSpec(content_size=2)
    corpus = [Example((0,), (1,))] * 20
    config = TrainConfig(steps=400, learning_rate=4.0, window=4, eval_every=100, seed=2)
    trained, history = train_sft(DenoiserParams.zeros(vocab), corpus, vocab, config)
    assert history.records[-1].held_out_loss < history.records[0].held_out_loss
    grid = predict(trained, _state([0, vocab.mask_id, vocab.eos_id, vocab.eos_id], vocab, prompt_len=1))
    assert int(grid[1].argmax()) == 1


def test_params_round_trip(tmp_path, vocab, rng):
    params = DenoiserParams.random(vocab, rng, radius=5)
    path = tmp_path / "params.json"
    save_params(path, params)
    loaded = load_params(path, vocab)
    assert np.array_equal(loaded.bias, params.bias)
    assert np.array_equal(loaded.assoc, params.assoc)
    assert loaded.radius == 5


def test_load_params_errors(tmp_path, vocab):
    path = tmp_path / "params.json"
    save_params(path, DenoiserParams.zeros(vocab))
    with pytest.raises(ConfigError):
        load_params(path, VocabSpec(content_size=6))
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload["version"] = "mdlm-lab-params/0"
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(VersionError):
        load_params(path)
