"""bfloat16 emulation: exact grids, ULP spacing, and update truncation.

Values are held as float64 that happen to lie exactly on the bfloat16 (or
float32) grid, so every quantization is an exact, auditable real-number
operation instead of a dtype cast. The point of the module is the
update-truncation trap: with masters kept on the bfloat16 grid, any
optimizer delta smaller than half the local grid spacing is erased by
round-to-nearest, no matter how many steps apply it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, UpdateRejected

BF16_MIN_NORMAL = kernels.BF16_MIN_NORMAL
BF16_MAX = kernels.BF16_MAX

MASTER_FORMATS = ("wide32", "bf16")
COMPUTE_FORMATS = ("wide64", "bf16")


class Bf16Scalar(float):
    """A float64 scalar guaranteed to lie on the bfloat16 grid.

    Construct through ``bf16_round``; the constructor itself does not
    re-round, it only marks intent. NaN propagates (a NaN Bf16Scalar is a
    legal, tagged value).
    """

    __slots__ = ()

    @property
    def bits(self) -> int:
        """The 16-bit storage pattern (top half of the float32 encoding)."""
        return int(np.float64(self).astype(np.float32).view(np.uint32) >> np.uint32(16))


def bf16_round(x: float) -> Bf16Scalar:
    """Round a real scalar to the nearest bfloat16 value (ties to even).

    Magnitudes below the smallest normal flush to signed zero; overflow goes
    to infinity; NaN propagates.
    """
    out = kernels.bf16_quantize(np.array([[float(x)]]))[0, 0]
    return Bf16Scalar(out)


def bf16_round_array(x: np.ndarray) -> np.ndarray:
    """Array version of ``bf16_round`` (any shape, float64 out)."""
    arr = np.asarray(x, dtype=np.float64)
    return kernels.bf16_quantize(arr.reshape(1, -1)).reshape(arr.shape)


def is_on_bf16_grid(x: float) -> bool:
    r = bf16_round(float(x))
    return bool(r == x or (math.isnan(r) and math.isnan(x)))


def ulp_bf16(x: float) -> float:
    """Grid spacing of bfloat16 at magnitude |x|: 2**(floor(log2|x|) - 7).

    Zero/subnormal magnitudes report the spacing at the smallest normal
    (use ``ulp_bf16_info`` to see the out-of-range flag). Infinite input
    returns inf; NaN returns NaN.
    """
    return ulp_bf16_info(x)[0]


def ulp_bf16_info(x: float) -> tuple[float, bool]:
    """(spacing, below_normal_range) for magnitude |x|."""
    x = float(x)
    if math.isnan(x):
        return (math.nan, False)
    if math.isinf(x):
        return (math.inf, False)
    mag = abs(x)
    if mag < BF16_MIN_NORMAL:
        return (math.ldexp(1.0, -126 - 7), True)
    return (math.ldexp(1.0, math.floor(math.log2(mag)) - 7), False)


@dataclass(frozen=True)
class PrecisionPolicy:
    """How masters accumulate and how forward compute is rounded.

    master_format:
      wide32 -- masters are never quantized; updates accumulate exactly and
                rounding happens only when compute copies are produced.
      bf16   -- masters live on the bfloat16 grid; every update result is
                rounded back onto the grid (the truncation regime).
    compute_format:
      wide64 -- forward ops run at full float64.
      bf16   -- forward ops round per op class (see autodiff).
    """

    master_format: str = "wide32"
    compute_format: str = "wide64"

    def __post_init__(self):
        if self.master_format not in MASTER_FORMATS:
            raise ConfigError(f"master_format must be one of {MASTER_FORMATS}")
        if self.compute_format not in COMPUTE_FORMATS:
            raise ConfigError(f"compute_format must be one of {COMPUTE_FORMATS}")

    def compute_copy(self, master: np.ndarray) -> np.ndarray:
        """Quantized copy of a master used for the forward pass."""
        if self.compute_format == "wide64":
            return np.array(master, dtype=np.float64)
        return bf16_round_array(master)


def apply_update(master, delta, policy: PrecisionPolicy):
    """Accumulate ``master + delta`` under the policy's master format.

    Scalars in, scalar out; arrays in, array out. Non-finite deltas are
    refused (UpdateRejected) with a count of offending entries; silently
    absorbing a NaN into a master is never acceptable.
    """
    scalar = np.isscalar(master) or getattr(master, "ndim", 0) == 0
    m = np.asarray(master, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    if m.shape != d.shape:
        raise UpdateRejected(f"update shape {d.shape} does not match master {m.shape}")
    bad = int(np.size(d) - np.count_nonzero(np.isfinite(d)))
    if bad:
        raise UpdateRejected(f"update rejected: {bad} non-finite entr{'y' if bad == 1 else 'ies'}")
    out = m + d
    if policy.master_format == "bf16":
        out = bf16_round_array(out)
    if scalar:
        return float(out)
    return out


@dataclass
class AuditRow:
    magnitude: float
    spacing: float
    update: float
    verdict: str  # "truncated" | "applied" | "vacuous"


@dataclass
class AuditReport:
    lr: float
    grad_scale: float
    rows: list[AuditRow] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return {
            "lr": self.lr,
            "grad_scale": self.grad_scale,
            "rows": [
                {
                    "magnitude": r.magnitude,
                    "spacing": r.spacing,
                    "update": r.update,
                    "verdict": r.verdict,
                }
                for r in self.rows
            ],
        }


# The canonical trap instance: a high-lr shared-expert row where the update
# is two orders of magnitude below half the local spacing.
REFERENCE_ROW = AuditRow(magnitude=115.5, spacing=0.5, update=0.04 * 0.005, verdict="truncated")


def audit_truncation(lr: float, grad_scale: float, magnitudes) -> AuditReport:
    """Predict per-magnitude whether a step of size lr*grad_scale survives.

    Under a bf16 master format, round-to-nearest erases any update smaller
    than half the grid spacing at the parameter's magnitude. Zero gradient
    gives a "vacuous" verdict (nothing to truncate). The report always
    includes the reference row (magnitude 115.5, update 2e-4, spacing 0.5)
    as the first entry.
    """
    update = abs(lr * grad_scale)
    report = AuditReport(lr=lr, grad_scale=grad_scale)
    report.rows.append(REFERENCE_ROW)
    for m in magnitudes:
        spacing = ulp_bf16(float(m))
        if grad_scale == 0.0:
            verdict = "vacuous"
        elif update < 0.5 * spacing:
            verdict = "truncated"
        else:
            verdict = "applied"
        report.rows.append(
            AuditRow(magnitude=float(m), spacing=spacing, update=update, verdict=verdict)
        )
    return report
