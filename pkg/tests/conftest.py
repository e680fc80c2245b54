import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- independent bit-level decoders, used as oracles throughout ---------


def oracle_e2m1(code: int) -> float:
    sign = -1.0 if code & 0x8 else 1.0
    e, m = (code >> 1) & 0x3, code & 0x1
    mag = m * 0.5 if e == 0 else 2.0 ** (e - 1) * (1 + m / 2)
    return sign * mag + 0.0


def oracle_e4m3(code: int) -> float:
    sign = -1.0 if code & 0x80 else 1.0
    e, m = (code >> 3) & 0xF, code & 0x7
    if e == 0xF and m == 0x7:
        return float("nan")
    mag = m / 8 * 2.0**-6 if e == 0 else 2.0 ** (e - 7) * (1 + m / 8)
    return sign * mag + 0.0


def nearest_code(x: float, decode, codes) -> int:
    """Brute-force round-to-nearest; ties go to the code with mantissa LSB 0."""
    best = None
    for c in codes:
        v = decode(c)
        if v != v:
            continue
        key = (abs(v - x), c & 1, c)
        if best is None or key < best[0]:
            best = (key, c)
    return best[1]
