"""Synthetic instruction/response corpus with an exact likelihood oracle.

Responses follow a first-order chain that starts from the last prompt token.
With probability ``copy_rate`` a step emits a uniformly chosen prompt token
instead of following the transition table. Given the prompt the response
is therefore still a first-order chain with matrix
``M_P = (1 - copy_rate) * T + copy_rate * h_P`` (``h_P`` the prompt histogram),
so exact scoring and exact posteriors stay available.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ._utils.errors import intercept_errors
from ._utils.seeding import derived_rng
from .common.errors import ConfigError, DomainError, ParseError, VersionError
from .core import VocabSpec, log_floor

logger = logging.getLogger(__name__)

CORPUS_VERSION = "mdlm-lab-corpus/1"
CORPUS_MODEL_VERSION = "mdlm-lab-corpus-model/1"
PRIOR_VERSION = "mdlm-lab-prior/1"

ZERO_TRANSITION_LOGPROB = math.log(1e-12)
"""Contribution of one zero-probability transition to an oracle score."""

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Example:
    """One instruction/response pair over content tokens.

    Attributes:
        prompt (Tuple[int, ...]): Question tokens (``L_Q >= 1``).
        response (Tuple[int, ...]): Answer tokens (``L_A >= 1``), without the EOS that
            terminates it inside a window.
    """

    prompt: Tuple[int, ...]
    response: Tuple[int, ...]

    @property
    def window_length(self) -> int:
        return len(self.prompt) + len(self.response) + 1


@dataclass
class CorpusModel:
    """Generative process of the toy corpus.

    Attributes:
        vocab (VocabSpec): Id layout.
        transitions (np.ndarray): ``V x V`` row-stochastic table over content + EOS;
            the EOS row is absorbing.
        templates (List[Tuple[int, ...]]): Prompt templates, drawn uniformly.
        copy_rate (float): Probability that a response step copies a prompt token.
        function_words (Tuple[int, ...]): Tokens whose marginal was boosted.
        seed (int): Seed the model was designed with.
        max_response_len (int): Longer (and empty) responses are resampled.
    """

    vocab: VocabSpec
    transitions: np.ndarray
    templates: List[Tuple[int, ...]]
    copy_rate: float = 0.0
    function_words: Tuple[int, ...] = ()
    seed: int = 0
    max_response_len: int = 64
    _chains: Dict[Tuple[int, ...], np.ndarray] = field(default_factory=dict, repr=False, compare=False)
    _acceptance: Dict[Tuple[int, ...], Tuple[float, np.ndarray]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.templates = [tuple(int(tok) for tok in template) for template in self.templates]
        self.function_words = tuple(int(tok) for tok in self.function_words)
        size = self.vocab.prediction_size
        if self.transitions.shape != (size, size):
            raise ConfigError(f"Transition table must be {size}x{size}, got {self.transitions.shape}")
        if np.any(self.transitions < 0):
            raise ConfigError("Transition table has negative entries")
        sums = self.transitions.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ConfigError(f"Transition row {int(np.argmax(np.abs(sums - 1.0)))} does not sum to 1")
        eos = self.vocab.eos_id
        if self.transitions[eos, eos] != 1.0:
            raise ConfigError("The EOS row must be absorbing")
        if not 0.0 <= self.copy_rate < 1.0:
            raise ConfigError(f"copy_rate must lie in [0, 1), got {self.copy_rate}")
        if self.max_response_len < 1:
            raise ConfigError(f"max_response_len must be at least 1, got {self.max_response_len}")
        if not self.templates:
            raise ConfigError("At least one prompt template is required")
        for template in self.templates:
            if not template or not all(self.vocab.is_content(tok) for tok in template):
                raise ConfigError(f"Template {template} must be a nonempty content sequence")
        self._check_reaches_eos()

    def _check_reaches_eos(self) -> None:
        # Reverse reachability from EOS over nonzero transitions.
        eos = self.vocab.eos_id
        reaches = np.zeros(self.vocab.prediction_size, dtype=bool)
        reaches[eos] = True
        edges = self.transitions > 0
        while True:
            grown = reaches | (edges & reaches[None, :]).any(axis=1)
            if np.array_equal(grown, reaches):
                break
            reaches = grown
        if not reaches.all():
            stuck = np.flatnonzero(~reaches)[:5].tolist()
            raise ConfigError(f"EOS is unreachable from tokens {stuck}")

    def chain(self, prompt: Sequence[int]) -> np.ndarray:
        """Effective response transition matrix ``M_P`` for a prompt."""
        key = tuple(int(tok) for tok in prompt)
        cached = self._chains.get(key)
        if cached is not None:
            return cached
        if self.copy_rate == 0.0 or not key:
            matrix = self.transitions
        else:
            size = self.vocab.prediction_size
            histogram = np.bincount(np.asarray(key), minlength=size)[:size] / len(key)
            matrix = (1.0 - self.copy_rate) * self.transitions + self.copy_rate * histogram[None, :]
            eos = self.vocab.eos_id
            matrix[eos] = 0.0
            matrix[eos, eos] = 1.0
        self._chains[key] = matrix
        return matrix

    def acceptance(self, prompt: Sequence[int]) -> Tuple[float, np.ndarray]:
        """Probability that the chain of ``prompt`` yields an accepted response, one to
        ``max_response_len`` tokens before EOS, and the table ``reach`` with
        ``reach[k, i]`` the probability of being at EOS ``k`` steps after token ``i``.

        Raises:
            DomainError: If the prompt is empty.
        """
        key = tuple(int(tok) for tok in prompt)
        if not key:
            raise DomainError("Acceptance needs a nonempty prompt")
        cached = self._acceptance.get(key)
        if cached is not None:
            return cached
        matrix = self.chain(key)
        eos = self.vocab.eos_id
        reach = np.zeros((self.max_response_len + 1, self.vocab.prediction_size))
        reach[0, eos] = 1.0
        for k in range(1, self.max_response_len + 1):
            reach[k] = matrix @ reach[k - 1]
        first = matrix[key[-1]].copy()
        first[eos] = 0.0
        result = (float(first @ reach[-1]), reach)
        self._acceptance[key] = result
        return result


def design_corpus_model(
    content_size: int,
    seed: int,
    n_templates: int = 16,
    prompt_len: Tuple[int, int] = (4, 8),
    branching: int = 3,
    n_function_words: int = 8,
    function_mass: float = 0.3,
    copy_rate: float = 0.1,
    eos_rate: float = 1.0 / 30.0,
    max_response_len: int = 64,
) -> CorpusModel:
    """Builds the designed toy corpus.

    Each content token has ``branching`` random successors (Dirichlet weights). A
    fixed share ``function_mass`` of every row goes to a small Zipf-weighted set of
    function words (ids ``0 .. n_function_words - 1``): these become the high-prior
    tokens. ``copy_rate`` makes prompt tokens recur in responses, and ``eos_rate``
    sets the per-step end probability (mean response length about ``1 / eos_rate``).

    Args:
        content_size (int): Number of ordinary tokens.
        seed (int): Design seed.
        n_templates (int): Number of prompt templates.
        prompt_len (Tuple[int, int]): Inclusive range of template lengths.
        branching (int): Successors per token.
        n_function_words (int): Size of the boosted set (0 disables it).
        function_mass (float): Row share routed to function words.
        copy_rate (float): Prompt-copy probability per response step.
        eos_rate (float): Per-step EOS probability.
        max_response_len (int): Resampling bound on response length.

    Returns:
        CorpusModel: The designed model.

    Example:
        ```python
        model = design_corpus_model(content_size=200, seed=7)
        corpus = generate_corpus(model, 1000, np.random.default_rng(0))
        ```
    """
    if branching < 1 or branching > content_size:
        raise ConfigError(f"branching must lie in [1, {content_size}]")
    if n_function_words > content_size or not 0.0 <= function_mass < 1.0:
        raise ConfigError("Function-word settings do not fit the vocabulary")
    if not 0.0 < eos_rate < 1.0 or function_mass + eos_rate >= 1.0:
        raise ConfigError("eos_rate must lie in (0, 1 - function_mass)")
    rng = np.random.default_rng(seed)
    vocab = VocabSpec(content_size=content_size)
    size = vocab.prediction_size
    eos = vocab.eos_id

    function_words = tuple(range(n_function_words))
    function_dist = np.zeros(size)
    if n_function_words:
        zipf = 1.0 / np.arange(1, n_function_words + 1)
        function_dist[:n_function_words] = zipf / zipf.sum()
    else:
        function_mass = 0.0

    transitions = np.zeros((size, size))
    successor_mass = 1.0 - function_mass - eos_rate
    for token in range(content_size):
        successors = rng.choice(content_size, size=branching, replace=False)
        weights = rng.dirichlet(np.full(branching, 2.0))
        np.add.at(transitions[token], successors, successor_mass * weights)
        transitions[token] += function_mass * function_dist
        transitions[token, eos] += eos_rate
    transitions[eos, eos] = 1.0
    transitions /= transitions.sum(axis=1, keepdims=True)

    lo, hi = prompt_len
    first_word = n_function_words if n_function_words < content_size else 0
    templates = [
        tuple(int(tok) for tok in rng.integers(first_word, content_size, size=int(rng.integers(lo, hi + 1))))
        for _ in range(n_templates)
    ]
    return CorpusModel(
        vocab=vocab,
        transitions=transitions,
        templates=templates,
        copy_rate=copy_rate,
        function_words=function_words,
        seed=seed,
        max_response_len=max_response_len,
    )


def _sample_response(model: CorpusModel, prompt: Tuple[int, ...], rng: np.random.Generator) -> Tuple[int, ...]:
    cumulative = np.cumsum(model.chain(prompt), axis=1)
    cumulative[:, -1] = 1.0
    eos = model.vocab.eos_id
    if model.acceptance(prompt)[0] <= 0.0:
        raise DomainError(f"Prompt {prompt} never yields a response of 1 to {model.max_response_len} tokens")
    while True:
        previous = prompt[-1]
        response: List[int] = []
        while len(response) <= model.max_response_len:
            token = int(np.searchsorted(cumulative[previous], rng.random(), side="right"))
            if token == eos:
                break
            response.append(token)
            previous = token
        if response and len(response) <= model.max_response_len:
            return tuple(response)


def generate_corpus(model: CorpusModel, n: int, rng: np.random.Generator) -> List[Example]:
    """Draws ``n`` i.i.d. examples.

    Prompts are uniform over the templates; responses run the prompt's chain until
    EOS. Empty and over-long responses are redrawn.
    """
    examples = []
    for _ in range(n):
        prompt = model.templates[int(rng.integers(len(model.templates)))]
        examples.append(Example(prompt, _sample_response(model, prompt, rng)))
    return examples


def generate_corpus_sharded(
    model: CorpusModel, n: int, seed: int, shards: int = 1, jobs: int = 1
) -> List[Example]:
    """Shard-parallel generation; shard ``i`` uses the seed derived from ``(seed, i)``.

    The output depends on ``(seed, n, shards)`` only, never on ``jobs``.
    """
    shards = max(1, min(shards, n)) if n else 1
    sizes = [n // shards + (1 if index < n % shards else 0) for index in range(shards)]

    def run(index: int) -> List[Example]:
        return generate_corpus(model, sizes[index], derived_rng(seed, index))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        parts = list(executor.map(run, range(shards)))
    return [example for part in parts for example in part]


def split_corpus(
    corpus: Sequence[Example], held_out_fraction: float, rng: np.random.Generator
) -> Tuple[List[Example], List[Example]]:
    """Random train/held-out split; a corpus of one example is shared by both sides."""
    if len(corpus) <= 1:
        return list(corpus), list(corpus)
    order = rng.permutation(len(corpus))
    held = min(len(corpus) - 1, max(1, int(round(held_out_fraction * len(corpus)))))
    return [corpus[i] for i in order[held:]], [corpus[i] for i in order[:held]]


@dataclass(frozen=True)
class OracleScore:
    """Exact score of a token sequence under the corpus process.

    Attributes:
        logprob (float): Sum of transition log-probabilities.
        length (int): Number of scored tokens.
        zero_probability (bool): Whether some transition had probability zero (each
            such transition contributes ``ZERO_TRANSITION_LOGPROB``).
    """

    logprob: float
    length: int
    zero_probability: bool = False

    @property
    def ppl(self) -> float:
        if self.length == 0:
            return math.inf
        return math.exp(-self.logprob / self.length)


def oracle_score(model: CorpusModel, response: Sequence[int], prompt: Sequence[int]) -> OracleScore:
    """Scores ``response`` token by token, the first token conditioned on ``prompt[-1]``.

    Exactly the given tokens are scored: append EOS to include termination. Generation
    only keeps responses of one to ``max_response_len`` tokens, so the score is the
    log-probability of the tokens given that the response is kept: the path probability
    times the chance of ending inside the bound from the last scored token, divided by
    the acceptance probability of the prompt.

    Raises:
        DomainError: If the prompt is empty, a token is outside content + EOS or the
            prompt never yields an accepted response.
    """
    if not prompt:
        raise DomainError("The oracle needs a nonempty prompt")
    size = model.vocab.prediction_size
    tokens = [int(tok) for tok in response]
    if any(not 0 <= tok < size for tok in list(prompt) + tokens):
        raise DomainError("Oracle tokens must lie in the content vocabulary plus EOS")
    matrix = model.chain(prompt)
    logprob = 0.0
    zero = False
    previous = int(prompt[-1])
    for token in tokens:
        p = matrix[previous, token]
        if p > 0.0:
            logprob += math.log(p)
        else:
            logprob += ZERO_TRANSITION_LOGPROB
            zero = True
        previous = token
    if tokens:
        accept, reach = model.acceptance(prompt)
        if accept <= 0.0:
            raise DomainError(f"Prompt {tuple(prompt)} never yields an accepted response")
        cap, eos = model.max_response_len, model.vocab.eos_id
        if tokens[0] == eos:
            kept = 0.0
        elif len(tokens) <= cap + 1:
            kept = float(reach[cap + 1 - len(tokens), tokens[-1]])
        else:
            kept = 1.0 if tokens[cap] == eos else 0.0
        if kept > 0.0:
            logprob += math.log(kept)
        else:
            logprob += ZERO_TRANSITION_LOGPROB
            zero = True
        logprob -= math.log(accept)
    if zero:
        logger.debug("Zero-probability transition in response of length %d", len(tokens))
    return OracleScore(logprob, len(tokens), zero)


def oracle_logprob(model: CorpusModel, response: Sequence[int], prompt: Sequence[int]) -> float:
    return oracle_score(model, response, prompt).logprob


def oracle_ppl(model: CorpusModel, response: Sequence[int], prompt: Sequence[int]) -> float:
    return oracle_score(model, response, prompt).ppl


def corpus_ppl_stats(model: CorpusModel, corpus: Sequence[Example]) -> Tuple[float, float]:
    """Mean and (population) standard deviation of oracle PPL over a corpus,
    each response scored with its terminating EOS."""
    if not corpus:
        raise DomainError("PPL statistics need a nonempty corpus")
    eos = model.vocab.eos_id
    ppls = np.array([oracle_ppl(model, list(ex.response) + [eos], ex.prompt) for ex in corpus])
    return float(ppls.mean()), float(ppls.std())


@dataclass
class PriorTable:
    """Term-frequency prior over the prediction support.

    Attributes:
        freq (np.ndarray): Length-``V`` empirical frequencies (sum to 1).
        log_prior (np.ndarray): ``log(freq)``; zero-count tokens get ``floor``.
        top (Tuple[int, ...]): Most frequent tokens (frequency desc, then id asc),
            zero-count tokens excluded.
        total (int): Number of counted tokens.
    """

    freq: np.ndarray
    log_prior: np.ndarray
    top: Tuple[int, ...]
    total: int

    @property
    def floor(self) -> float:
        return log_floor(self.total)

    def top_mask(self) -> np.ndarray:
        mask = np.zeros(self.freq.shape[0], dtype=bool)
        mask[list(self.top)] = True
        return mask


def prior_from_counts(counts: np.ndarray, top_n: int = 100) -> PriorTable:
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise DomainError("A prior needs at least one token")
    freq = counts / total
    log_prior = np.full(counts.shape[0], log_floor(total))
    seen = counts > 0
    log_prior[seen] = np.log(freq[seen])
    # lexsort: last key is primary; ties fall back to the lower id.
    order = np.lexsort((np.arange(counts.shape[0]), -counts))
    top = tuple(int(tok) for tok in order if counts[tok] > 0)[:top_n]
    return PriorTable(freq=freq, log_prior=log_prior, top=top, total=total)


def compute_prior(corpus: Iterable[Example], vocab: VocabSpec, top_n: int = 100) -> PriorTable:
    """Term frequencies over prompt and response tokens.

    Raises:
        DomainError: If the corpus is empty.
    """
    counts = np.zeros(vocab.prediction_size, dtype=np.int64)
    seen_any = False
    for example in corpus:
        seen_any = True
        np.add.at(counts, np.asarray(example.prompt + example.response, dtype=np.int64), 1)
    if not seen_any:
        raise DomainError("compute_prior needs a nonempty corpus")
    return prior_from_counts(counts, top_n)


# --- persistence -----------------------------------------------------------------


def _check_version(found: object, expected: str, where: str) -> None:
    if found != expected:
        raise VersionError(f"{where}: version {found!r} is not supported (expected {expected!r})")


def _parse_tokens(raw: object, vocab: VocabSpec, line: int, name: str) -> Tuple[int, ...]:
    if not isinstance(raw, list) or not raw:
        raise ParseError(f"line {line}: '{name}' must be a nonempty integer array")
    tokens = []
    for value in raw:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"line {line}: '{name}' holds a non-integer {value!r}")
        if not 0 <= value < vocab.alphabet_size:
            raise ParseError(f"line {line}: token id {value} outside alphabet of size {vocab.alphabet_size}")
        if not vocab.is_content(value):
            raise ParseError(f"line {line}: '{name}' holds reserved token {vocab.name(value)}")
        tokens.append(value)
    return tuple(tokens)


@dataclass
class CorpusFile:
    examples: List[Example]
    vocab: VocabSpec
    seed: int


@intercept_errors(message_prefix="Failed to save corpus: ")
def save_corpus(path: PathLike, examples: Sequence[Example], vocab: VocabSpec, seed: int) -> None:
    """Writes the JSON-lines corpus: a header line, then one record per example."""
    lines = [json.dumps({"version": CORPUS_VERSION, "vocab": vocab.content_size, "seed": seed})]
    lines.extend(
        json.dumps({"prompt": list(ex.prompt), "response": list(ex.response)}, separators=(",", ":"))
        for ex in examples
    )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


@intercept_errors(message_prefix="Failed to load corpus: ")
def load_corpus(path: PathLike) -> CorpusFile:
    """Reads a corpus written by ``save_corpus``.

    Raises:
        ParseError: On malformed lines (the message names the line number) or token
            ids outside the alphabet.
        VersionError: If the header version differs.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError("line 1: missing header")
    header = _load_json_line(lines[0], 1)
    _check_version(header.get("version"), CORPUS_VERSION, "line 1")
    try:
        vocab = VocabSpec(content_size=int(header["vocab"]))
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"line 1: bad header ({e})") from None
    examples = []
    for number, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        record = _load_json_line(text, number)
        if "prompt" not in record or "response" not in record:
            raise ParseError(f"line {number}: records need 'prompt' and 'response'")
        examples.append(
            Example(
                _parse_tokens(record["prompt"], vocab, number, "prompt"),
                _parse_tokens(record["response"], vocab, number, "response"),
            )
        )
    return CorpusFile(examples, vocab, seed)


def _load_json_line(text: str, number: int) -> dict:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"line {number}: {e.msg}") from None
    if not isinstance(record, dict):
        raise ParseError(f"line {number}: expected a JSON object")
    return record


@intercept_errors(message_prefix="Failed to save corpus model: ")
def save_corpus_model(path: PathLike, model: CorpusModel) -> None:
    payload = {
        "version": CORPUS_MODEL_VERSION,
        "vocab": model.vocab.content_size,
        "transitions": model.transitions.tolist(),
        "templates": [list(t) for t in model.templates],
        "copy_rate": model.copy_rate,
        "function_words": list(model.function_words),
        "seed": model.seed,
        "max_response_len": model.max_response_len,
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8", newline="\n")


@intercept_errors(message_prefix="Failed to load corpus model: ")
def load_corpus_model(path: PathLike) -> CorpusModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_version(payload.get("version"), CORPUS_MODEL_VERSION, str(path))
    return CorpusModel(
        vocab=VocabSpec(content_size=int(payload["vocab"])),
        transitions=np.asarray(payload["transitions"], dtype=np.float64),
        templates=[tuple(t) for t in payload["templates"]],
        copy_rate=float(payload["copy_rate"]),
        function_words=tuple(payload["function_words"]),
        seed=int(payload["seed"]),
        max_response_len=int(payload["max_response_len"]),
    )


@intercept_errors(message_prefix="Failed to save prior: ")
def save_prior(path: PathLike, prior: PriorTable) -> None:
    counts = np.rint(prior.freq * prior.total).astype(np.int64)
    payload = {
        "version": PRIOR_VERSION,
        "total": prior.total,
        "counts": counts.tolist(),
        "freq": prior.freq.tolist(),
        "top100": list(prior.top),
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8", newline="\n")


@intercept_errors(message_prefix="Failed to load prior: ")
def load_prior(path: PathLike, top_n: Optional[int] = None) -> PriorTable:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_version(payload.get("version"), PRIOR_VERSION, str(path))
    table = prior_from_counts(np.asarray(payload["counts"], dtype=np.int64), top_n or len(payload["top100"]))
    if list(table.top) != list(payload["top100"]):
        raise ParseError(f"{path}: 'top100' disagrees with the stored counts")
    return table
