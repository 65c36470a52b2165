"""Reverse-mode automatic differentiation over 2-D float64 matrices.

A ``Tape`` records every op; ``Tape.backward`` walks the record in reverse
and accumulates vector-Jacobian products into ``Matrix.grad``. All data
lives in float64. Precision emulation happens per op: under an active
``compute_format("bf16")`` context, matmul/gelu/add outputs land on the
bfloat16 grid while softmax, the expert combine and loss reductions land on
the float32 grid (mirroring mixed-precision practice, where normalizations
and losses stay in the wider type). Gradients always accumulate in wide
float64; narrow-precision update loss is modeled separately, at the
parameter-update step.

Exactness notes baked into the ops:

* ``softmax_rows`` post-corrects each row so the selected weights can sum
  to exactly 1 (for two columns the correction is error-free by Sterbenz's
  lemma);
* ``combine`` uses the compensated kernel, so a convex combination of
  identical expert outputs reproduces the common value bitwise;
* ``topk_rows`` breaks ties toward the lowest index and is treated as a
  piecewise-constant selection: indices get no gradient, gathered values do.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, EvaluationError, ShapeError

_ACTIVE_FORMAT = "wide64"

# Which grid an op's output is rounded onto under compute_format("bf16").
# "arith" ops emulate the narrow compute type, "norm" ops the float32 type
# used for softmax/combination/reduction work.
_BF16_OP_GRID = {"arith": "bf16", "norm": "wide32"}


@contextlib.contextmanager
def compute_format(fmt: str):
    """Activate a compute format ("wide64" or "bf16") for ops run inside."""
    global _ACTIVE_FORMAT
    if fmt not in ("wide64", "bf16"):
        raise ConfigError(f"unknown compute format {fmt!r}")
    prev = _ACTIVE_FORMAT
    _ACTIVE_FORMAT = fmt
    try:
        yield
    finally:
        _ACTIVE_FORMAT = prev


def active_format() -> str:
    return _ACTIVE_FORMAT


def _q(data: np.ndarray, kind: str) -> np.ndarray:
    """Round op output onto the grid the active format dictates."""
    if _ACTIVE_FORMAT == "wide64":
        return data
    grid = _BF16_OP_GRID[kind]
    if grid == "bf16":
        return kernels.bf16_quantize(data)
    return kernels.f32_quantize(data)


class Matrix:
    """A 2-D float64 array tracked by a tape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<Matrix{tag} {self.shape[0]}x{self.shape[1]} grad={self.requires_grad}>"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Matrix, inputs: tuple[Matrix, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


def _accum(m: Matrix, g: np.ndarray) -> None:
    if not m.requires_grad:
        return
    if m.grad is None:
        m.grad = np.zeros_like(m.data)
    m.grad += g


class Tape:
    """Operation recorder. One tape per forward/backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Matrix] = []

    # -- leaf constructors -------------------------------------------------

    def param(self, data: np.ndarray, name: str = "") -> Matrix:
        m = Matrix(data, requires_grad=True, name=name)
        self.leaves.append(m)
        return m

    def const(self, data: np.ndarray, name: str = "") -> Matrix:
        return Matrix(data, requires_grad=False, name=name)

    def _record(self, out_data: np.ndarray, inputs: tuple[Matrix, ...], vjp: Callable) -> Matrix:
        out = Matrix(out_data, requires_grad=any(i.requires_grad for i in inputs))
        if out.requires_grad:
            self.nodes.append(_Node(out, inputs, vjp))
        return out

    # -- ops ---------------------------------------------------------------

    def matmul(self, a: Matrix, b: Matrix) -> Matrix:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes do not chain: {a.shape} @ {b.shape}")
        ad = _q(a.data, "arith")  # narrow compute copies of the operands
        bd = _q(b.data, "arith")
        out_data = _q(kernels.matmul(ad, bd), "arith")

        def vjp(g: np.ndarray) -> None:
            # Frozen operands (requires_grad=False) skip their dW matmul
            # entirely; the other side still flows.
            if a.requires_grad:
                _accum(a, kernels.matmul(g, bd.T))
            if b.requires_grad:
                _accum(b, kernels.matmul(ad.T, g))

        return self._record(out_data, (a, b), vjp)

    def add(self, a: Matrix, b: Matrix) -> Matrix:
        """Elementwise add; b may be a (1, D) row broadcast over a's rows."""
        if a.shape != b.shape and not (b.shape == (1, a.shape[1])):
            raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
        out_data = _q(a.data + b.data, "arith")

        def vjp(g: np.ndarray) -> None:
            _accum(a, g)
            if b.shape == a.shape:
                _accum(b, g)
            else:
                _accum(b, g.sum(axis=0, keepdims=True))

        return self._record(out_data, (a, b), vjp)

    def sub(self, a: Matrix, b: Matrix) -> Matrix:
        if a.shape != b.shape:
            raise ShapeError(f"sub shapes differ: {a.shape} - {b.shape}")
        out_data = _q(a.data - b.data, "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, g)
            _accum(b, -g)

        return self._record(out_data, (a, b), vjp)

    def mul(self, a: Matrix, b: Matrix) -> Matrix:
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")
        out_data = _q(a.data * b.data, "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return self._record(out_data, (a, b), vjp)

    def cmul(self, a: Matrix, c: np.ndarray) -> Matrix:
        """Multiply by a constant array (same shape or row-broadcast)."""
        c = np.asarray(c, dtype=np.float64)
        out_data = _q(a.data * c, "norm")

        def vjp(g: np.ndarray) -> None:
            ga = g * c
            if ga.shape != a.shape:
                raise ShapeError("cmul constant must broadcast without changing shape")
            _accum(a, ga)

        return self._record(out_data, (a,), vjp)

    def smul(self, a: Matrix, s: float) -> Matrix:
        s = float(s)
        out_data = _q(a.data * s, "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, g * s)

        return self._record(out_data, (a,), vjp)

    def gelu(self, x: Matrix) -> Matrix:
        xd = _q(x.data, "arith")
        out_data = _q(kernels.gelu(xd), "arith")

        def vjp(g: np.ndarray) -> None:
            _accum(x, g * kernels.gelu_grad(xd))

        return self._record(out_data, (x,), vjp)

    def transpose(self, a: Matrix) -> Matrix:
        def vjp(g: np.ndarray) -> None:
            _accum(a, g.T)

        return self._record(np.ascontiguousarray(a.data.T), (a,), vjp)

    def softmax_rows(self, x: Matrix) -> Matrix:
        """Row softmax whose rows are post-corrected to sum to 1.

        With two columns the correction (minority = 1 - majority) is exact
        real arithmetic on the active grid; with more columns the majority
        entry absorbs a compensated residual, leaving the row sum within one
        rounding of 1.
        """
        d = x.data
        m = np.max(d, axis=1, keepdims=True)
        e = np.exp(d - m)
        s = np.sum(e, axis=1, keepdims=True)
        p = _q(e / s, "norm")

        rows = np.arange(d.shape[0])
        jmax = np.argmax(d, axis=1)  # first max: ties go to the lowest index
        if d.shape[1] == 2:
            jmin = 1 - jmax
            p[rows, jmin] = 1.0 - p[rows, jmax]
        elif d.shape[1] > 2:
            mask = np.ones_like(p)
            mask[rows, jmax] = 0.0
            others = p * mask
            # Neumaier-compensated row sums of the non-argmax entries.
            acc = np.zeros(d.shape[0])
            comp = np.zeros(d.shape[0])
            for j in range(d.shape[1]):
                col = others[:, j]
                t = acc + col
                comp += np.where(
                    np.abs(acc) >= np.abs(col), (acc - t) + col, (col - t) + acc
                )
                acc = t
            p[rows, jmax] = _q(((1.0 - acc) - comp)[:, None], "norm")[:, 0]

        def vjp(g: np.ndarray) -> None:
            inner = np.sum(g * p, axis=1, keepdims=True)
            _accum(x, p * (g - inner))

        return self._record(p, (x,), vjp)

    def topk_rows(self, x: Matrix, k: int) -> tuple[Matrix, np.ndarray]:
        """Per-row top-k values (descending), ties broken toward lower index.

        Returns (values, indices). Selection is non-differentiable; the
        gathered values route gradients back to their source entries.
        """
        if not 1 <= k <= x.shape[1]:
            raise ConfigError(f"top-k k={k} out of range for {x.shape[1]} columns")
        order = np.argsort(-x.data, axis=1, kind="stable")
        idx = order[:, :k]
        rows = np.arange(x.shape[0])[:, None]
        vals = x.data[rows, idx]

        def vjp(g: np.ndarray) -> None:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (rows, idx), g)
            _accum(x, gx)

        return self._record(vals, (x,), vjp), idx

    def gather_rows(self, a: Matrix, row_idx: np.ndarray) -> Matrix:
        row_idx = np.asarray(row_idx, dtype=np.intp)

        def vjp(g: np.ndarray) -> None:
            ga = np.zeros_like(a.data)
            np.add.at(ga, row_idx, g)
            _accum(a, ga)

        return self._record(a.data[row_idx], (a,), vjp)

    def assemble_rows(
        self, pieces: Sequence[tuple[np.ndarray, Matrix]], total_rows: int
    ) -> Matrix:
        """Scatter row-disjoint pieces into a (total_rows, D) canvas."""
        if not pieces:
            raise ConfigError("assemble_rows needs at least one piece")
        width = pieces[0][1].shape[1]
        canvas = np.zeros((total_rows, width), dtype=np.float64)
        seen = np.zeros(total_rows, dtype=bool)
        for ridx, piece in pieces:
            ridx = np.asarray(ridx, dtype=np.intp)
            if seen[ridx].any():
                raise ShapeError("assemble_rows pieces overlap")
            seen[ridx] = True
            canvas[ridx] = piece.data
        mats = tuple(p for _, p in pieces)
        idxs = [np.asarray(r, dtype=np.intp) for r, _ in pieces]

        def vjp(g: np.ndarray) -> None:
            for ridx, piece in zip(idxs, mats):
                _accum(piece, g[ridx])

        return self._record(canvas, mats, vjp)

    def slice_cols(self, a: Matrix, start: int, stop: int) -> Matrix:
        def vjp(g: np.ndarray) -> None:
            ga = np.zeros_like(a.data)
            ga[:, start:stop] = g
            _accum(a, ga)

        return self._record(np.ascontiguousarray(a.data[:, start:stop]), (a,), vjp)

    def slice_rows(self, a: Matrix, start: int, stop: int) -> Matrix:
        def vjp(g: np.ndarray) -> None:
            ga = np.zeros_like(a.data)
            ga[start:stop] = g
            _accum(a, ga)

        return self._record(np.ascontiguousarray(a.data[start:stop]), (a,), vjp)

    def concat_cols(self, parts: Sequence[Matrix]) -> Matrix:
        widths = [p.shape[1] for p in parts]
        out_data = np.concatenate([p.data for p in parts], axis=1)
        offsets = np.cumsum([0] + widths)
        mats = tuple(parts)

        def vjp(g: np.ndarray) -> None:
            for i, p in enumerate(mats):
                _accum(p, g[:, offsets[i] : offsets[i + 1]])

        return self._record(out_data, mats, vjp)

    def combine(self, weights: Matrix, outputs: Sequence[Matrix]) -> Matrix:
        """Compensated sum_j weights[:, j] * outputs[j]."""
        if weights.shape[1] != len(outputs):
            raise ShapeError(
                f"combine got {weights.shape[1]} weight columns for {len(outputs)} outputs"
            )
        stacked = np.stack([o.data for o in outputs])
        out_data = _q(kernels.combine_topk(weights.data, stacked), "norm")
        mats = tuple(outputs)

        def vjp(g: np.ndarray) -> None:
            gw = np.empty_like(weights.data)
            for j, o in enumerate(mats):
                gw[:, j] = np.sum(g * o.data, axis=1)
                _accum(o, weights.data[:, j : j + 1] * g)
            _accum(weights, gw)

        return self._record(out_data, (weights, *mats), vjp)

    def sum_rows(self, a: Matrix) -> Matrix:
        """Row sums: (T, E) -> (T, 1)."""
        out_data = _q(np.sum(a.data, axis=1, keepdims=True), "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, np.repeat(g, a.shape[1], axis=1))

        return self._record(out_data, (a,), vjp)

    def div(self, a: Matrix, b: Matrix) -> Matrix:
        """Elementwise a / b; b may be a (T, 1) column broadcast over a."""
        if a.shape != b.shape and b.shape != (a.shape[0], 1):
            raise ShapeError(f"div shapes incompatible: {a.shape} / {b.shape}")
        out_data = _q(a.data / b.data, "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, g / b.data)
            gb = -g * a.data / (b.data * b.data)
            if b.shape != a.shape:
                gb = gb.sum(axis=1, keepdims=True)
            _accum(b, gb)

        return self._record(out_data, (a, b), vjp)

    def sum_all(self, a: Matrix) -> Matrix:
        out_data = _q(np.array([[np.sum(a.data)]]), "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, np.full_like(a.data, g[0, 0]))

        return self._record(out_data, (a,), vjp)

    def mean_all(self, a: Matrix) -> Matrix:
        n = a.data.size
        out_data = _q(np.array([[np.sum(a.data) / n]]), "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, np.full_like(a.data, g[0, 0] / n))

        return self._record(out_data, (a,), vjp)

    def mean_rows(self, a: Matrix) -> Matrix:
        """Column means: (T, E) -> (1, E)."""
        t = a.shape[0]
        out_data = _q(np.sum(a.data, axis=0, keepdims=True) / t, "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(a, np.repeat(g / t, t, axis=0))

        return self._record(out_data, (a,), vjp)

    def mse(self, pred: Matrix, target: np.ndarray) -> Matrix:
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
        diff = pred.data - target
        n = diff.size
        out_data = _q(np.array([[np.sum(diff * diff) / n]]), "norm")

        def vjp(g: np.ndarray) -> None:
            _accum(pred, (2.0 / n) * g[0, 0] * diff)

        return self._record(out_data, (pred,), vjp)

    # -- backward ----------------------------------------------------------

    def backward(self, loss: Matrix) -> None:
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if not np.isfinite(loss.data[0, 0]):
            raise EvaluationError(f"loss is not finite: {loss.data[0, 0]}")
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.out.grad is None:
                continue
            node.vjp(node.out.grad)
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def mha_forward(
    tape: Tape,
    query: Matrix,
    key_value: Matrix,
    heads: int,
    wq: Matrix,
    bq: Matrix,
    wk: Matrix,
    bk: Matrix,
    wv: Matrix,
    bv: Matrix,
    wo: Matrix,
    bo: Matrix,
) -> Matrix:
    """Multi-head attention of query rows over key/value rows.

    query: (T, h); key_value: (S, kv_dim); projections map both into an
    h-wide space split across `heads`. Returns (T, h).
    """
    h = wq.shape[1]
    if h % heads != 0:
        raise ConfigError(f"model width {h} not divisible by {heads} heads")
    dh = h // heads
    scale = 1.0 / math.sqrt(dh)

    q = tape.add(tape.matmul(query, wq), bq)
    k = tape.add(tape.matmul(key_value, wk), bk)
    v = tape.add(tape.matmul(key_value, wv), bv)

    head_outs = []
    for i in range(heads):
        qh = tape.slice_cols(q, i * dh, (i + 1) * dh)
        kh = tape.slice_cols(k, i * dh, (i + 1) * dh)
        vh = tape.slice_cols(v, i * dh, (i + 1) * dh)
        logits = tape.smul(tape.matmul(qh, tape.transpose(kh)), scale)
        attn = tape.softmax_rows(logits)
        head_outs.append(tape.matmul(attn, vh))
    merged = head_outs[0] if heads == 1 else tape.concat_cols(head_outs)
    return tape.add(tape.matmul(merged, wo), bo)


def grad_check(
    fn: Callable[[Tape, list[Matrix]], Matrix],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients of a scalar function against central differences.

    `fn(tape, mats)` must build a (1,1) Matrix from `mats` on `tape`.
    Returns the worst relative error max(|a - n|) / max(|a|, |n|, 1e-4)
    over every coordinate of every input. The 1e-4 floor makes the
    comparison absolute for dead coordinates (true gradient 0, central
    difference pure roundoff ~1e-11 at this step size); a smaller floor
    would demand agreement below what the difference quotient can resolve.
    Non-finite function values raise EvaluationError.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    def evaluate(arrs: list[np.ndarray]) -> float:
        t = Tape()
        mats = [t.param(a.copy()) for a in arrs]
        val = fn(t, mats).item()
        if not math.isfinite(val):
            raise EvaluationError(f"function value not finite: {val}")
        return val

    tape = Tape()
    mats = [tape.param(a.copy()) for a in inputs]
    loss = fn(tape, mats)
    if not math.isfinite(loss.item()):
        raise EvaluationError(f"function value not finite: {loss.item()}")
    tape.backward(loss)
    analytic = [m.grad.copy() for m in mats]

    worst = 0.0
    for i, base in enumerate(inputs):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            perturbed = [b.copy() for b in inputs]
            perturbed[i].reshape(-1)[j] = orig + step
            f_plus = evaluate(perturbed)
            perturbed[i].reshape(-1)[j] = orig - step
            f_minus = evaluate(perturbed)
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst
