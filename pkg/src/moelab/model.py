"""Dense FFN stacks and their mixture-of-experts counterparts.

A model is a structural spec plus a flat name -> float64 array parameter
dict (insertion order is the checkpoint order). Blocks apply a residual
connection around either a single FFN or a routed mixture:

    dense:  x + FFN(x)
    moe:    x + [ sum_s FFN_s(x) + sum_j scaling * g_j(x) * FFN_rj(x) ]

The mixture path is built so that a freshly converted model is *bitwise*
equal to its dense source when the shared experts are zero, the routed
experts are clones, top_k equals the routed count and scaling is 1: row
dispatch reuses the same matmul rows, the selected softmax weights sum to
exactly 1, and the combine kernel is compensated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .autodiff import Matrix, Tape
from .errors import ConfigError, ShapeError
from .precision import PrecisionPolicy
from .routing import GateSpec, RoutingDecision, gate_forward, gate_param_count


@dataclass(frozen=True)
class ModelSpec:
    hidden: int = 64
    inner: int = 256
    n_layers: int = 6
    kind: str = "dense"  # dense | moe
    activation: str = "gelu"
    ffn_bias: bool = True
    n_routed: int = 2
    n_shared: int = 1
    routed_scaling: float = 1.0
    gate: GateSpec = field(default_factory=GateSpec)

    def __post_init__(self):
        if self.kind not in ("dense", "moe"):
            raise ConfigError(f"model kind must be dense|moe, got {self.kind!r}")
        if self.activation != "gelu":
            raise ConfigError(
                f"experts use exact-erf gelu; activation {self.activation!r} unsupported"
            )
        if not self.ffn_bias:
            raise ConfigError("FFN blocks carry biases; disabling them is unsupported")
        if self.kind == "moe" and not (1 <= self.gate.top_k <= self.n_routed):
            raise ConfigError(
                f"top_k={self.gate.top_k} out of range for {self.n_routed} routed experts"
            )

    def to_jsonable(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "hidden", "inner", "n_layers", "kind", "activation", "ffn_bias",
            "n_routed", "n_shared", "routed_scaling")}
        d["gate"] = self.gate.to_jsonable()
        return d

    @classmethod
    def from_jsonable(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["gate"] = GateSpec.from_jsonable(d.get("gate", {}))
        return cls(**d)


FFN_FIELDS = ("w1", "b1", "w2", "b2")


def ffn_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{f}" for f in FFN_FIELDS]


def init_ffn(hidden: int, inner: int, rng: np.random.Generator, w_std: float | None = None) -> dict:
    """Weights ~ N(0, 1/fan_in) (std overridable), biases zero."""
    s1 = w_std if w_std is not None else 1.0 / np.sqrt(hidden)
    s2 = w_std if w_std is not None else 1.0 / np.sqrt(inner)
    return {
        "w1": rng.normal(0.0, s1, (hidden, inner)),
        "b1": np.zeros((1, inner)),
        "w2": rng.normal(0.0, s2, (inner, hidden)),
        "b2": np.zeros((1, hidden)),
    }


def zero_ffn(hidden: int, inner: int) -> dict:
    return {
        "w1": np.zeros((hidden, inner)),
        "b1": np.zeros((1, inner)),
        "w2": np.zeros((inner, hidden)),
        "b2": np.zeros((1, hidden)),
    }


def ffn_param_count(hidden: int, inner: int) -> int:
    return hidden * inner + inner + inner * hidden + hidden


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def block_prefix(self, i: int) -> str:
        return f"block{i}"

    def copy(self) -> "Model":
        return Model(
            spec=replace(self.spec),
            params={k: v.copy() for k, v in self.params.items()},
            frozen=set(self.frozen),
        )


def init_dense_model(spec: ModelSpec, rng: np.random.Generator, w_std: float | None = None) -> Model:
    if spec.kind != "dense":
        raise ConfigError("init_dense_model needs a dense spec")
    params: dict[str, np.ndarray] = {}
    for i in range(spec.n_layers):
        ffn = init_ffn(spec.hidden, spec.inner, rng, w_std=w_std)
        for f in FFN_FIELDS:
            params[f"block{i}.ffn.{f}"] = ffn[f]
    return Model(spec=spec, params=params)


@dataclass
class ForwardResult:
    output: Matrix
    aux_losses: list[Matrix]
    decisions: list[RoutingDecision]
    bound: dict[str, Matrix]


def bind_params(tape: Tape, model: Model, policy: PrecisionPolicy, training: bool) -> dict[str, Matrix]:
    """Wrap masters as tape leaves (trainable) or constants (frozen).

    Each leaf holds a quantized compute copy per the policy; masters are
    untouched.
    """
    bound: dict[str, Matrix] = {}
    for name, arr in model.params.items():
        data = policy.compute_copy(arr)
        if training and name not in model.frozen:
            bound[name] = tape.param(data, name=name)
        else:
            bound[name] = tape.const(data, name=name)
    return bound


def ffn_forward(tape: Tape, x: Matrix, bound: dict[str, Matrix], prefix: str) -> Matrix:
    h = tape.gelu(tape.add(tape.matmul(x, bound[f"{prefix}.w1"]), bound[f"{prefix}.b1"]))
    return tape.add(tape.matmul(h, bound[f"{prefix}.w2"]), bound[f"{prefix}.b2"])


def moe_block_forward(
    tape: Tape,
    x: Matrix,
    model: Model,
    block: int,
    bound: dict[str, Matrix],
    *,
    training: bool,
    encoder_states: np.ndarray | None,
    seq_len: int | None,
) -> tuple[Matrix, RoutingDecision]:
    spec = model.spec
    pre = model.block_prefix(block)
    gate_bound = {
        k.rsplit(".", 1)[1]: v for k, v in bound.items() if k.startswith(f"{pre}.gate.")
    }
    decision = gate_forward(
        tape,
        spec.gate,
        gate_bound,
        x,
        n_experts=spec.n_routed,
        encoder_states=encoder_states,
        training=training,
        seq_len=seq_len,
    )

    t = x.shape[0]
    k = spec.gate.top_k
    slot_outputs: list[Matrix] = []
    for j in range(k):
        pieces: list[tuple[np.ndarray, Matrix]] = []
        slot_experts = decision.indices[:, j]
        for e in np.unique(slot_experts):
            rows = np.nonzero(slot_experts == e)[0]
            sub = tape.gather_rows(x, rows) if rows.size != t else x
            out = ffn_forward(tape, sub, bound, f"{pre}.routed{int(e)}")
            pieces.append((rows, out))
        if len(pieces) == 1 and pieces[0][1].shape[0] == t:
            slot_outputs.append(pieces[0][1])
        else:
            slot_outputs.append(tape.assemble_rows(pieces, t))

    weights = tape.smul(decision.weights, spec.routed_scaling)
    mix = tape.combine(weights, slot_outputs)
    for s in range(spec.n_shared):
        mix = tape.add(mix, ffn_forward(tape, x, bound, f"{pre}.shared{s}"))
    return mix, decision


def forward_model(
    tape: Tape,
    model: Model,
    x_data: np.ndarray,
    *,
    policy: PrecisionPolicy | None = None,
    training: bool = False,
    encoder_states: np.ndarray | None = None,
    seq_len: int | None = None,
    bound: dict[str, Matrix] | None = None,
) -> ForwardResult:
    """Run the stack. Residual connections wrap every block."""
    policy = policy or PrecisionPolicy()
    x_data = np.asarray(x_data, dtype=np.float64)
    if x_data.ndim != 2 or x_data.shape[1] != model.spec.hidden:
        raise ShapeError(
            f"input must be (T, {model.spec.hidden}), got {x_data.shape}"
        )
    if bound is None:
        bound = bind_params(tape, model, policy, training)
    x = tape.const(policy.compute_copy(x_data), name="input")
    aux: list[Matrix] = []
    decisions: list[RoutingDecision] = []
    for i in range(model.spec.n_layers):
        if model.spec.kind == "dense":
            y = ffn_forward(tape, x, bound, f"block{i}.ffn")
        else:
            y, decision = moe_block_forward(
                tape, x, model, i, bound,
                training=training, encoder_states=encoder_states, seq_len=seq_len,
            )
            decisions.append(decision)
            if decision.aux_loss is not None:
                aux.append(decision.aux_loss)
        x = tape.add(x, y)
    return ForwardResult(output=x, aux_losses=aux, decisions=decisions, bound=bound)


def forward_numpy(model: Model, x: np.ndarray) -> np.ndarray:
    """Plain wide64 inference without a tape (dense models only)."""
    if model.spec.kind != "dense":
        raise ConfigError("forward_numpy handles dense stacks; use forward_model for moe")
    x = np.asarray(x, dtype=np.float64)
    for i in range(model.spec.n_layers):
        p = model.params
        h = kernels.gelu(kernels.matmul(x, p[f"block{i}.ffn.w1"]) + p[f"block{i}.ffn.b1"])
        y = kernels.matmul(h, p[f"block{i}.ffn.w2"]) + p[f"block{i}.ffn.b2"]
        x = x + y
    return x


def _ffn_numpy(params: dict[str, np.ndarray], prefix: str, x: np.ndarray) -> np.ndarray:
    h = kernels.gelu(kernels.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return kernels.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def pair_cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Mean per-row cosine between two (T, D) outputs.

    Computed as sign(dot) * sqrt(dot^2 / (|a|^2 * |b|^2)) so bitwise-equal
    (or exactly negated) rows report exactly +/-1.0. Rows where either side
    has zero norm are excluded; returns (mean, n_excluded). If every row is
    excluded the mean is NaN.
    """
    num = np.sum(a * b, axis=1)
    na = np.sum(a * a, axis=1)
    nb = np.sum(b * b, axis=1)
    valid = (na != 0.0) & (nb != 0.0)
    if not valid.any():
        return (float("nan"), int(len(num)))
    n, d1, d2 = num[valid], na[valid], nb[valid]
    cos = np.sign(n) * np.sqrt((n * n) / (d1 * d2))
    return (float(np.mean(cos)), int((~valid).sum()))


def expert_output_similarity(model: Model, block: int, probe_x: np.ndarray) -> dict:
    """Pairwise routed-expert output cosines for one block (wide64, no tape)."""
    if model.spec.kind != "moe":
        raise ConfigError("similarity probe needs a mixture model")
    probe_x = np.asarray(probe_x, dtype=np.float64)
    pre = model.block_prefix(block)
    outs = [
        _ffn_numpy(model.params, f"{pre}.routed{j}", probe_x)
        for j in range(model.spec.n_routed)
    ]
    pairs = {}
    skipped = []
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            mean, excluded = pair_cosine(outs[i], outs[j])
            if np.isnan(mean):
                skipped.append((i, j))
            else:
                pairs[(i, j)] = mean
    return {"block": block, "pairs": pairs, "skipped_pairs": skipped}


def moe_param_count(spec: ModelSpec) -> int:
    per_ffn = ffn_param_count(spec.hidden, spec.inner)
    per_block = (spec.n_routed + spec.n_shared) * per_ffn + gate_param_count(
        spec.gate, spec.hidden, spec.n_routed
    )
    return spec.n_layers * per_block
