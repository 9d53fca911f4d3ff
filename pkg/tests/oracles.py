"""Independent reference computations the package is checked against.

Deliberately naive: plain loops and integer arithmetic, no shared code with
the implementation under test.
"""
from fractions import Fraction
from math import exp, lgamma, log


def crc16_ccitt_bitwise(bits, crc=0xFFFF):
    for b in bits:
        top = ((crc >> 15) & 1) ^ int(b)
        crc = (crc << 1) & 0xFFFF
        if top:
            crc ^= 0x1021
    return crc


def crc16_ccitt_bytes(data: bytes, crc=0xFFFF):
    bits = [(byte >> (7 - i)) & 1 for byte in data for i in range(8)]
    return crc16_ccitt_bitwise(bits, crc)


def credit_capacities(rate, n):
    """Bits per packet from a running credit counter: take the whole part each time."""
    rate = Fraction(rate)
    credit = Fraction(0)
    out = []
    for _ in range(n):
        credit += rate
        whole = int(credit)
        out.append(whole)
        credit -= whole
    return out


def binom_upper_tail(k, n, p):
    """P[X >= k] for X ~ Binomial(n, p), summed term by term in log space."""
    if k <= 0:
        return 1.0
    if p == 0:
        return 0.0
    total = 0.0
    for j in range(k, n + 1):
        lt = lgamma(n + 1) - lgamma(j + 1) - lgamma(n - j + 1) + j * log(p)
        lt += (n - j) * log(1 - p) if p < 1 else 0.0
        total += exp(lt)
    return min(total, 1.0)


def binom_sigma(n, p):
    return (n * p * (1 - p)) ** 0.5
