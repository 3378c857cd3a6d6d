from typing import Protocol

import numpy as np

from .core import SequenceState, VocabSpec


class Denoiser(Protocol):
    """Anything that maps a decoding window to per-position distributions.

    ``predict`` returns an ``L x V`` grid (V = content tokens + EOS); rows sum to
    one. Implementations carry no time input.
    """

    vocab: VocabSpec

    def predict(self, state: SequenceState) -> np.ndarray:
        ...
