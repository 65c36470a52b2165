"""Pure-numpy kernel lane.

Every kernel here pins its floating-point evaluation order so that results
are bitwise reproducible and agree with the compiled lane:

* ``matmul`` accumulates along k in ascending order, one multiply and one
  add per term (never BLAS, which fuses and reorders);
* ``combine_topk`` uses error-free transformations (Dekker product, Knuth
  two-sum), so a convex combination of identical expert outputs returns the
  shared value exactly;
* ``bf16_quantize`` rounds float64 directly onto the bfloat16 grid
  (round-to-nearest-even) without an intermediate float32 step, which would
  double-round on ties.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LANE = "numpy"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Smallest positive normal bfloat16 value; anything below flushes to zero.
BF16_MIN_NORMAL = 2.0 ** -126
# Largest finite bfloat16 value: (2 - 2^-7) * 2^127.
BF16_MAX = (2.0 - 2.0 ** -7) * 2.0 ** 127

_SPLITTER = 134217729.0  # 2**27 + 1, Dekker split constant for float64


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(T,K) @ (K,D) with ascending-k accumulation, bitwise == triple loop."""
    k_dim = a.shape[1]
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(k_dim):
        # One rounded multiply and one rounded add per (i, j), in k order.
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of exact GELU: Phi(x) + x * phi(x)."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * (x * x)) * _INV_SQRT2PI
    return cdf + x * pdf


def bf16_quantize(x: np.ndarray) -> np.ndarray:
    """Round each float64 element to the nearest bfloat16-representable value.

    Ties round to even mantissa. Values with magnitude below the smallest
    normal bfloat16 flush to (signed) zero; values beyond the largest finite
    bfloat16 become infinity. NaN and infinity pass through.
    """
    x = np.asarray(x, dtype=np.float64)
    frac, expo = np.frexp(x)  # x = frac * 2**expo, frac in [0.5, 1)
    # frac * 256 lies in [128, 256); rint gives round-half-to-even.
    q = np.rint(np.ldexp(frac, 8))
    carry = q >= 256.0
    q = np.where(carry, 128.0, q)
    expo = expo + carry.astype(expo.dtype)
    out = np.ldexp(q, expo - 8)

    finite = np.isfinite(x)
    out = np.where(finite, out, x)
    flush = finite & (np.abs(x) < BF16_MIN_NORMAL)
    out = np.where(flush, np.copysign(0.0, x), out)
    over = finite & (expo - 1 > 127)  # unbiased exponent beyond bf16 range
    out = np.where(over, np.copysign(np.inf, x), out)
    return out


def _two_sum(a, b):
    s = a + b
    t = s - a
    err = (a - (s - t)) + (b - t)
    return s, err


def _split(a):
    t = _SPLITTER * a
    hi = t - (t - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    err = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, err


def combine_topk(weights: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """Compensated sum_j weights[t, j] * outputs[j, t, d].

    weights: (T, k), outputs: (k, T, D). The error-free transformations keep
    the combination exact enough that, when all k expert outputs are
    identical and the weights sum to exactly 1, the result is bitwise equal
    to the common output.
    """
    k = weights.shape[1]
    acc, err = _two_prod(weights[:, 0:1], outputs[0])
    for j in range(1, k):
        p, pe = _two_prod(weights[:, j : j + 1], outputs[j])
        acc, se = _two_sum(acc, p)
        err = err + (se + pe)
    return acc + err
