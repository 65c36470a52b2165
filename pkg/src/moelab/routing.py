"""Token-choice routers and their balance losses.

Three gate architectures score tokens against routed experts:

* ``linear``: one weight matrix, logits = x @ W. Init N(0, 0.01^2).
* ``mlp``: Linear -> GELU -> Linear. The final layer starts near-silent
  (N(0, 0.002^2), zero bias) so early routing is driven by the token
  distribution, not the head.
* ``cross_attention``: tokens attend over per-task instruction states
  (multi-head, separate key/value width), then a near-silent linear head
  maps the attended vector to expert logits. Without instruction states the
  gate falls back to self-attention over the token batch and flags it.

Selection is top-k over softmax scores with ties to the lowest expert
index: a uniformly zero gate therefore sends every token to expert 0, which
is exactly the degenerate cold-start the telemetry needs to be able to see.

The balance ("aux") losses match the usual token-choice formulation:
``global`` weighs mean scores by realized per-expert load scaled by E;
``seq`` applies the same idea within each sequence, normalizing counts by
seq_len * top_k / E, then averages over sequences. Both are multiplied by
alpha and differentiate only through the scores (counts are data).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Matrix, Tape, mha_forward
from .errors import ConfigError, ShapeError

GATE_KINDS = ("linear", "mlp", "cross_attention")
AUX_KINDS = ("global", "seq")


@dataclass(frozen=True)
class GateSpec:
    kind: str = "linear"
    top_k: int = 1
    norm_topk_prob: bool = False
    alpha: float = 0.01
    aux_kind: str = "global"
    gate_hidden: int = 256
    # Key/value width for the cross-attention gate. The default matches the
    # desk hidden width so the no-encoder-states fallback (self-attention
    # through the same projections) stays well-typed, mirroring the
    # reference setup where both widths coincide.
    encoder_dim: int = 64
    heads: int = 2

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ConfigError(f"gate kind must be one of {GATE_KINDS}, got {self.kind!r}")
        if self.aux_kind not in AUX_KINDS:
            raise ConfigError(f"aux kind must be one of {AUX_KINDS}, got {self.aux_kind!r}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")

    def to_jsonable(self) -> dict:
        return {k: getattr(self, k) for k in (
            "kind", "top_k", "norm_topk_prob", "alpha", "aux_kind",
            "gate_hidden", "encoder_dim", "heads")}

    @classmethod
    def from_jsonable(cls, d: dict) -> "GateSpec":
        return cls(**d)


def init_gate(spec: GateSpec, hidden: int, n_experts: int, rng: np.random.Generator) -> dict:
    """Fresh gate parameters. "Default random" weights are N(0, 1/fan_in)."""
    if spec.kind == "linear":
        return {"w": rng.normal(0.0, 0.01, (hidden, n_experts))}
    if spec.kind == "mlp":
        return {
            "w1": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, spec.gate_hidden)),
            "b1": np.zeros((1, spec.gate_hidden)),
            "w2": rng.normal(0.0, 0.002, (spec.gate_hidden, n_experts)),
            "b2": np.zeros((1, n_experts)),
        }
    enc = spec.encoder_dim
    return {
        "wq": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
        "bq": np.zeros((1, hidden)),
        "wk": rng.normal(0.0, 1.0 / np.sqrt(enc), (enc, hidden)),
        "bk": np.zeros((1, hidden)),
        "wv": rng.normal(0.0, 1.0 / np.sqrt(enc), (enc, hidden)),
        "bv": np.zeros((1, hidden)),
        "wo": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
        "bo": np.zeros((1, hidden)),
        "head_w": rng.normal(0.0, 0.002, (hidden, n_experts)),
        "head_b": np.zeros((1, n_experts)),
    }


def gate_param_names(spec: GateSpec) -> list[str]:
    if spec.kind == "linear":
        return ["w"]
    if spec.kind == "mlp":
        return ["w1", "b1", "w2", "b2"]
    return ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "head_w", "head_b"]


def gate_param_count(spec: GateSpec, hidden: int, n_experts: int) -> int:
    if spec.kind == "linear":
        return hidden * n_experts
    if spec.kind == "mlp":
        return hidden * spec.gate_hidden + spec.gate_hidden + spec.gate_hidden * n_experts + n_experts
    enc = spec.encoder_dim
    return (
        hidden * hidden + hidden  # q
        + enc * hidden + hidden   # k
        + enc * hidden + hidden   # v
        + hidden * hidden + hidden  # out proj
        + hidden * n_experts + n_experts  # head
    )


@dataclass
class RoutingDecision:
    """One block's routing outcome for one batch of tokens."""

    indices: np.ndarray      # (T, k) selected expert ids, slot 0 = strongest
    weights: Matrix          # (T, k) combine weights (post-normalization)
    scores: Matrix           # (T, E) full softmax scores
    logits: Matrix           # (T, E)
    aux_loss: Matrix | None = None
    fallback_self_attention: bool = False


def _gate_logits(
    tape: Tape,
    spec: GateSpec,
    bound: dict[str, Matrix],
    x: Matrix,
    encoder_states: np.ndarray | None,
) -> tuple[Matrix, bool]:
    if spec.kind == "linear":
        return tape.matmul(x, bound["w"]), False
    if spec.kind == "mlp":
        h = tape.gelu(tape.add(tape.matmul(x, bound["w1"]), bound["b1"]))
        return tape.add(tape.matmul(h, bound["w2"]), bound["b2"]), False
    fallback = encoder_states is None
    if fallback:
        if spec.encoder_dim != x.shape[1]:
            raise ConfigError(
                "self-attention fallback feeds hidden states through the k/v "
                f"projections, which need encoder_dim == hidden width "
                f"({spec.encoder_dim} != {x.shape[1]})"
            )
        ctx = x
    else:
        encoder_states = np.asarray(encoder_states, dtype=np.float64)
        if encoder_states.ndim != 2 or encoder_states.shape[1] != spec.encoder_dim:
            raise ShapeError(
                f"encoder states must be (S, {spec.encoder_dim}), got {encoder_states.shape}"
            )
        ctx = tape.const(encoder_states, name="encoder_states")
    attended = mha_forward(
        tape, x, ctx, spec.heads,
        bound["wq"], bound["bq"], bound["wk"], bound["bk"],
        bound["wv"], bound["bv"], bound["wo"], bound["bo"],
    )
    return tape.add(tape.matmul(attended, bound["head_w"]), bound["head_b"]), fallback


def _aux_global(tape: Tape, scores: Matrix, indices: np.ndarray, n_experts: int, alpha: float) -> Matrix:
    t, k = indices.shape
    counts = np.bincount(indices.ravel(), minlength=n_experts).astype(np.float64)
    ce = counts / (t * k)
    fi = (ce * n_experts).reshape(1, -1)
    pi = tape.mean_rows(scores)
    return tape.smul(tape.sum_all(tape.cmul(pi, fi)), alpha)


def _aux_seq(
    tape: Tape, scores: Matrix, indices: np.ndarray, n_experts: int, alpha: float, seq_len: int
) -> Matrix:
    t, k = indices.shape
    if t % seq_len != 0:
        raise ConfigError(f"{t} tokens do not divide into sequences of {seq_len}")
    n_seq = t // seq_len
    total: Matrix | None = None
    for b in range(n_seq):
        idx_b = indices[b * seq_len : (b + 1) * seq_len]
        counts = np.bincount(idx_b.ravel(), minlength=n_experts).astype(np.float64)
        ce = (counts / (seq_len * k / n_experts)).reshape(1, -1)
        pi_b = tape.mean_rows(tape.slice_rows(scores, b * seq_len, (b + 1) * seq_len))
        term = tape.sum_all(tape.cmul(pi_b, ce))
        total = term if total is None else tape.add(total, term)
    return tape.smul(total, alpha / n_seq)


def gate_forward(
    tape: Tape,
    spec: GateSpec,
    bound: dict[str, Matrix],
    x: Matrix,
    *,
    n_experts: int,
    encoder_states: np.ndarray | None = None,
    training: bool = False,
    seq_len: int | None = None,
) -> RoutingDecision:
    """Score, select and weigh experts for every token row of x."""
    if spec.top_k > n_experts:
        raise ConfigError(f"top_k={spec.top_k} exceeds {n_experts} experts")
    logits, fallback = _gate_logits(tape, spec, bound, x, encoder_states)
    scores = tape.softmax_rows(logits)
    vals, idx = tape.topk_rows(scores, spec.top_k)

    if spec.norm_topk_prob and spec.top_k > 1:
        denom = tape.add(
            tape.sum_rows(vals), tape.const(np.full((vals.shape[0], 1), 1e-20))
        )
        weights = tape.div(vals, denom)
    else:
        weights = vals

    aux = None
    if training and spec.alpha > 0.0:
        if spec.aux_kind == "global":
            aux = _aux_global(tape, scores, idx, n_experts, spec.alpha)
        else:
            if seq_len is None:
                raise ConfigError("seq aux loss needs seq_len")
            aux = _aux_seq(tape, scores, idx, n_experts, spec.alpha, seq_len)

    return RoutingDecision(
        indices=idx,
        weights=weights,
        scores=scores,
        logits=logits,
        aux_loss=aux,
        fallback_self_attention=fallback,
    )
