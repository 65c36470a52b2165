"""Hot numeric kernels with two interchangeable lanes.

The compiled Cython lane is used when the extension built; otherwise the
pure-numpy lane takes over. ``MOELAB_KERNELS=numpy`` or
``MOELAB_KERNELS=compiled`` forces a lane (the latter raises if the
extension is unavailable). Both lanes pin the same floating-point
evaluation order, so ``matmul``, ``bf16_quantize`` and ``combine_topk``
agree bit for bit; ``gelu``/``gelu_grad`` may differ by an ulp because the
two lanes use different erf implementations.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError, ShapeError
from . import _fallback

BF16_MIN_NORMAL = _fallback.BF16_MIN_NORMAL
BF16_MAX = _fallback.BF16_MAX

_requested = os.environ.get("MOELAB_KERNELS", "").strip().lower()

if _requested == "numpy":
    _impl = _fallback
elif _requested == "compiled":
    from . import _core as _impl  # raises ImportError if never built
elif _requested in ("", "auto"):
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _fallback
else:
    raise ConfigError(f"MOELAB_KERNELS must be 'numpy' or 'compiled', got {_requested!r}")

LANE: str = _impl.LANE


def _as_c64(x: np.ndarray, ndim: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _as_c64(a, 2, "a")
    b = _as_c64(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.shape} @ {b.shape}")
    return _impl.matmul(a, b)


def gelu(x: np.ndarray) -> np.ndarray:
    return _impl.gelu(_as_c64(x, 2, "x"))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return _impl.gelu_grad(_as_c64(x, 2, "x"))


def bf16_quantize(x: np.ndarray) -> np.ndarray:
    """Elementwise round-to-nearest-even onto the bfloat16 grid (2-D arrays)."""
    return _impl.bf16_quantize(_as_c64(x, 2, "x"))


def f32_quantize(x: np.ndarray) -> np.ndarray:
    """Elementwise round-to-nearest-even onto the float32 grid."""
    arr = np.asarray(x, dtype=np.float64)
    return arr.astype(np.float32).astype(np.float64)


def combine_topk(weights: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    weights = _as_c64(weights, 2, "weights")
    outputs = np.ascontiguousarray(outputs, dtype=np.float64)
    if outputs.ndim != 3:
        raise ShapeError(f"outputs must be (k, T, D), got shape {outputs.shape}")
    if outputs.shape[0] != weights.shape[1] or outputs.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"combine shapes disagree: weights {weights.shape}, outputs {outputs.shape}"
        )
    return _impl.combine_topk(weights, outputs)
