import csv
import math

import pytest
from pydantic import ValidationError

from mdlm_lab.common.errors import DomainError
from mdlm_lab.hazard import (
    HAZARD_HEADER,
    ConvMode,
    HazardFamily,
    hazard_grid,
    q_conv,
    q_default,
    q_semi_ar,
    q_value,
    verify_ordering,
    write_hazard_csv,
)

RATIO = HazardFamily(kind="ratio", c=0.1, p_cap=0.5)
ZERO = HazardFamily(kind="zero")


def _brute_q(c, p_cap, r, W):
    return math.log(1.0 - min(p_cap, c * r / W))


def test_q_value_example():
    assert q_value(RATIO, 8, 128) == pytest.approx(-0.006270, abs=1e-6)
    assert q_value(ZERO, 8, 128) == 0.0


def test_q_value_caps_and_vanishes():
    family = HazardFamily(kind="ratio", c=10.0, p_cap=0.5)
    assert q_value(family, 8, 8) == pytest.approx(math.log(0.5))
    values = [q_value(RATIO, 4, W) for W in (4, 16, 64, 256, 4096, 10**9)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(0.0, abs=1e-9)


def test_q_value_rejects_empty_steps():
    with pytest.raises(DomainError):
        q_value(RATIO, 0, 8)
    with pytest.raises(DomainError):
        q_value(RATIO, 2, 0)


def test_threshold_family():
    family = HazardFamily(kind="threshold", c=0.1, w0=32)
    assert q_value(family, 4, 32) == 0.0
    assert q_value(family, 4, 16) == pytest.approx(math.log(1 - 0.025))
    with pytest.raises(ValidationError):
        HazardFamily(kind="threshold")


def test_q_default_matches_brute_force():
    L, S = 64, 16
    r = L // S
    expected = sum(_brute_q(0.1, 0.5, r, t * r) for t in range(1, S + 1))
    assert q_default(L, S, RATIO) == pytest.approx(expected, rel=1e-12)


def test_q_semi_ar_matches_brute_force():
    L, S, b = 64, 16, 4
    r = L // S
    total = 0.0
    for _ in range(b):
        window = 0
        for _ in range(S // b):
            window += r
            total += _brute_q(0.1, 0.5, r, window)
    assert q_semi_ar(L, S, b, RATIO) == pytest.approx(total, rel=1e-12)


def test_q_conv_matches_brute_force():
    L, S, K = 64, 16, 16
    r = L // S
    ramp = sum(_brute_q(0.1, 0.5, r, t * r) for t in range(1, K // r + 1))
    steady = (L - K) // r * _brute_q(0.1, 0.5, r, K)
    assert q_conv(L, S, K, RATIO) == pytest.approx(ramp + steady, rel=1e-12)
    literal = q_conv(L, S, K, RATIO, ConvMode.PER_TOKEN)
    assert literal == pytest.approx(ramp + (L - K) * _brute_q(0.1, 0.5, r, K), rel=1e-12)


def test_degenerate_schedules_equal_default():
    for L, S in [(64, 16), (128, 32), (64, 64)]:
        assert q_semi_ar(L, S, 1, RATIO) == q_default(L, S, RATIO)
        assert q_conv(L, S, L, RATIO) == q_default(L, S, RATIO)
    result = verify_ordering(64, 16, 1, RATIO)
    assert result.q_semi_ar == result.q_conv == result.q_default
    assert result.ok


def test_tiny_family_one_token_per_step():
    family = HazardFamily(kind="ratio", c=1e-12)
    assert q_default(64, 64, family) == pytest.approx(0.0, abs=1e-9)


def test_zero_family_is_zero_everywhere():
    assert q_default(64, 16, ZERO) == 0.0
    assert q_semi_ar(64, 16, 4, ZERO) == 0.0
    assert q_conv(64, 16, 16, ZERO) == 0.0
    result = verify_ordering(64, 16, 4, ZERO)
    assert (result.q_semi_ar, result.q_conv, result.q_default) == (0.0, 0.0, 0.0)
    assert result.ok


@pytest.mark.parametrize("L", [64, 128])
@pytest.mark.parametrize("S", [8, 16, 32])
@pytest.mark.parametrize("b", [2, 4, 8])
def test_ordering_holds_for_ratio_family(L, S, b):
    result = verify_ordering(L, S, b, RATIO)
    assert result.semi_ar_le_conv and result.conv_le_default


def test_default_is_nonincreasing_in_steps():
    values = [q_default(64, S, RATIO) for S in (1, 2, 4, 8, 16, 32, 64)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_semi_ar_is_nondecreasing_in_block_size():
    # larger b means smaller blocks
    values = [q_semi_ar(64, 16, b, RATIO) for b in (16, 8, 4, 2, 1)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_conv_is_nondecreasing_in_kernel():
    values = [q_conv(64, 16, K, RATIO) for K in range(4, 65, 4)]
    assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
    assert values[-1] == q_default(64, 16, RATIO)


def test_schedule_arguments_must_divide():
    with pytest.raises(DomainError):
        q_default(64, 12, RATIO)
    with pytest.raises(DomainError):
        q_semi_ar(64, 16, 3, RATIO)
    with pytest.raises(DomainError):
        q_conv(64, 16, 6, RATIO)


def test_hazard_grid_skips_inadmissible_points(tmp_path):
    rows = hazard_grid([64], [16, 12], [2, 32], RATIO)
    assert [(row.L, row.S, row.b, row.K) for row in rows] == [(64, 16, 2, 32)]
    assert rows[0].params == "c=0.1;p_cap=0.5"
    path = tmp_path / "hazard.csv"
    write_hazard_csv(path, rows)
    with open(path, encoding="utf-8", newline="") as handle:
        records = list(csv.reader(handle))
    assert tuple(records[0]) == HAZARD_HEADER
    assert records[1][-1] == "true"
    assert float(records[1][6]) == rows[0].Q_default
