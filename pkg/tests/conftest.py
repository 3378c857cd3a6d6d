import numpy as np
import pytest

from mdlm_lab.core import VocabSpec
from mdlm_lab.corpus import CorpusModel, design_corpus_model, generate_corpus


@pytest.fixture
def vocab() -> VocabSpec:
    return VocabSpec(content_size=4)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def chain_model(content_size: int, table, templates, copy_rate: float = 0.0, max_response_len: int = 64) -> CorpusModel:
    """Builds a corpus model from content rows; the EOS row is added as absorbing."""
    vocab = VocabSpec(content_size=content_size)
    size = vocab.prediction_size
    transitions = np.zeros((size, size))
    transitions[:content_size] = np.asarray(table, dtype=np.float64)
    transitions[vocab.eos_id, vocab.eos_id] = 1.0
    return CorpusModel(
        vocab=vocab,
        transitions=transitions,
        templates=[tuple(t) for t in templates],
        copy_rate=copy_rate,
        function_words=(),
        seed=0,
        max_response_len=max_response_len,
    )


@pytest.fixture
def deterministic_model() -> CorpusModel:
    """0 -> 1 -> 2 -> EOS, every prompt is [0]."""
    table = [
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
    return chain_model(3, table, [[0]])


@pytest.fixture
def small_model() -> CorpusModel:
    """A three-token chain with branching, prompts [0, 1] and [2]."""
    table = [
        [0.1, 0.5, 0.2, 0.2],
        [0.3, 0.1, 0.4, 0.2],
        [0.25, 0.25, 0.25, 0.25],
    ]
    return chain_model(3, table, [[0, 1], [2]])


@pytest.fixture(scope="session")
def designed_model() -> CorpusModel:
    return design_corpus_model(content_size=24, seed=3, n_templates=6, max_response_len=24, eos_rate=0.08)


@pytest.fixture(scope="session")
def designed_corpus(designed_model):
    return generate_corpus(designed_model, 200, np.random.default_rng(7))
