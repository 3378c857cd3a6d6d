"""Closed-form survival of decoding schedules against structural corruption.

A step that unmasks ``r`` tokens while the effective window holds ``W`` tokens
fails with probability ``p_r(W)``; ``q = log(1 - p)`` and a schedule's log
survival ``Q`` is the sum of ``q`` over its steps. Larger ``Q`` means less risk.
"""

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .common.errors import DomainError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ORDERING_RTOL = 1e-12


class HazardKind(str, Enum):
    """Hazard families.

    **Enum Members**:
        - `ZERO` ("zero"): ``p = 0``.
        - `RATIO` ("ratio"): ``p = min(p_cap, c * r / W)``.
        - `THRESHOLD` ("threshold"): ratio below ``w0``, 0 from ``W >= w0`` on.
    """

    ZERO = "zero"
    RATIO = "ratio"
    THRESHOLD = "threshold"

    def __str__(self):
        return self.value


class ConvMode(str, Enum):
    """Steady-state accounting of the convolutional schedule.

    **Enum Members**:
        - `PER_STEP` ("per_step"): ``(L - K) / r`` steps at ``W = K``.
        - `PER_TOKEN` ("per_token"): ``(L - K)`` terms at ``W = K``.
    """

    PER_STEP = "per_step"
    PER_TOKEN = "per_token"

    def __str__(self):
        return self.value


class HazardFamily(BaseModel):
    """A parametric ``p_r(W)``, nonincreasing in ``W``.

    Attributes:
        kind (HazardKind): Family.
        c (float): Ratio coefficient.
        p_cap (float): Upper bound on ``p``.
        w0 (Optional[float]): Threshold of the ``threshold`` family.

    Example:
        ```python
        family = HazardFamily(kind="ratio", c=0.1)
        q_value(family, 8, 128)  # log(1 - 0.00625)
        ```
    """

    model_config = ConfigDict(frozen=True)

    kind: HazardKind = HazardKind.RATIO
    c: float = Field(default=0.1, gt=0.0)
    p_cap: float = Field(default=0.5, gt=0.0, lt=1.0)
    w0: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _check_threshold(self) -> "HazardFamily":
        if self.kind is HazardKind.THRESHOLD and self.w0 is None:
            raise ValueError("the threshold family needs w0")
        return self

    def p(self, r: float, W: float) -> float:  # pylint: disable=invalid-name
        if self.kind is HazardKind.ZERO:
            return 0.0
        if self.kind is HazardKind.THRESHOLD and W >= self.w0:
            return 0.0
        return min(self.p_cap, self.c * r / W)

    def label(self) -> str:
        if self.kind is HazardKind.ZERO:
            return ""
        label = f"c={self.c!r};p_cap={self.p_cap!r}"
        return label + (f";w0={self.w0!r}" if self.kind is HazardKind.THRESHOLD else "")


def q_value(family: HazardFamily, r: float, W: float) -> float:  # pylint: disable=invalid-name
    """``log(1 - p_r(W))``; ``-inf`` when ``p >= 1``.

    Raises:
        DomainError: If ``r < 1`` or ``W < 1``.
    """
    if r < 1 or W < 1:
        raise DomainError(f"r and W must be at least 1, got r={r}, W={W}")
    p = family.p(r, W)
    if p == 0.0:
        return 0.0
    if p >= 1.0:
        return -math.inf
    return math.log1p(-p)


def _rate(L: int, S: int) -> int:  # pylint: disable=invalid-name
    if L < 1 or S < 1 or L % S:
        raise DomainError(f"S={S} must divide L={L}")
    return L // S


def _ramp(family: HazardFamily, r: int, steps: int) -> float:
    return math.fsum(q_value(family, r, t * r) for t in range(1, steps + 1))


def q_default(L: int, S: int, family: HazardFamily) -> float:  # pylint: disable=invalid-name
    """``sum_{t=1}^{S} q_r(t r)`` with ``r = L / S``."""
    r = _rate(L, S)
    return _ramp(family, r, S)


def q_semi_ar(L: int, S: int, b: int, family: HazardFamily) -> float:  # pylint: disable=invalid-name
    """``b * sum_{t=1}^{S/b} q_r(t r)``: each block restarts its window at ``W = r``."""
    if b < 1 or L % b or S % b:
        raise DomainError(f"b={b} must divide L={L} and S={S}")
    r = _rate(L, S)
    return b * _ramp(family, r, S // b)


def q_conv(
    L: int,  # pylint: disable=invalid-name
    S: int,  # pylint: disable=invalid-name
    K: int,  # pylint: disable=invalid-name
    family: HazardFamily,
    mode: ConvMode = ConvMode.PER_STEP,
) -> float:
    """Ramp up to ``W = K`` followed by a steady state at ``W = K``.

    Raises:
        DomainError: If ``K > L`` or ``r`` does not divide ``K``.
    """
    r = _rate(L, S)
    if K < 1 or K > L or K % r:
        raise DomainError(f"K={K} must lie in [1, L={L}] and be a multiple of r={r}")
    steady_terms = (L - K) / r if mode is ConvMode.PER_STEP else float(L - K)
    steady = steady_terms * q_value(family, r, K) if steady_terms else 0.0
    return steady + _ramp(family, r, K // r)


@dataclass
class OrderingResult:
    q_semi_ar: float
    q_conv: float
    q_default: float
    semi_ar_le_conv: bool
    conv_le_default: bool

    @property
    def ok(self) -> bool:
        return self.semi_ar_le_conv and self.conv_le_default


def _le(a: float, b: float) -> bool:
    return a <= b + ORDERING_RTOL * max(1.0, abs(a), abs(b))


def verify_ordering(
    L: int,  # pylint: disable=invalid-name
    S: int,  # pylint: disable=invalid-name
    b: int,
    family: HazardFamily,
    K: Optional[int] = None,  # pylint: disable=invalid-name
    mode: ConvMode = ConvMode.PER_STEP,
) -> OrderingResult:
    """Evaluates ``Q_semi_ar <= Q_conv <= Q_default`` with ``K = L / b`` unless given."""
    K = L // b if K is None else K
    sa, conv, default = q_semi_ar(L, S, b, family), q_conv(L, S, K, family, mode), q_default(L, S, family)
    return OrderingResult(sa, conv, default, _le(sa, conv), _le(conv, default))


@dataclass
class HazardRow:
    L: int  # pylint: disable=invalid-name
    S: int  # pylint: disable=invalid-name
    b: int
    K: int  # pylint: disable=invalid-name
    family: str
    params: str
    Q_default: float  # pylint: disable=invalid-name
    Q_semi_ar: float  # pylint: disable=invalid-name
    Q_conv: float  # pylint: disable=invalid-name
    ordering_ok: bool


HAZARD_HEADER = ("L", "S", "b", "K", "family", "params", "Q_default", "Q_semi_ar", "Q_conv", "ordering_ok")


def hazard_grid(  # pylint: disable=invalid-name
    Ls: Iterable[int],
    Ss: Iterable[int],
    bs: Iterable[int],
    family: HazardFamily,
    mode: ConvMode = ConvMode.PER_STEP,
) -> List[HazardRow]:
    """Rows for every admissible ``(L, S, b)``; combinations that do not divide are skipped."""
    rows = []
    Ss, bs = list(Ss), list(bs)  # pylint: disable=invalid-name
    for L in Ls:  # pylint: disable=invalid-name
        for S in Ss:  # pylint: disable=invalid-name
            for b in bs:
                if L % S or L % b or S % b or (L // b) % (L // S):
                    logger.debug("Skipping inadmissible L=%d S=%d b=%d", L, S, b)
                    continue
                result = verify_ordering(L, S, b, family, mode=mode)
                rows.append(
                    HazardRow(
                        L, S, b, L // b, str(family.kind), family.label(),
                        result.q_default, result.q_semi_ar, result.q_conv, result.ok,
                    )
                )
    return rows


def write_hazard_csv(path: PathLike, rows: Iterable[HazardRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HAZARD_HEADER)
        for row in rows:
            writer.writerow(
                [row.L, row.S, row.b, row.K, row.family, row.params,
                 repr(row.Q_default), repr(row.Q_semi_ar), repr(row.Q_conv), str(row.ordering_ok).lower()]
            )
