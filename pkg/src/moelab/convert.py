"""Dense -> mixture conversion and its equivalence certification.

Three rules govern a conversion, and each has teeth here:

1. Structural consistency: experts inherit the source FFN structure
   exactly (erf-GELU, same inner width, biases present). Requesting any
   other expert structure (the classic one is a gated-SiLU expert) is
   refused up front, because cloned weights are meaningless in a different
   wiring.
2. Weight cloning: every routed expert is a bitwise copy of the source FFN,
   and the routed path is combined with scaling 1.0. Scalings like
   1/sqrt(N) or 1/N are accepted only as deliberate negative controls; the
   verifier will fail them.
3. Shared-expert init: zeros for the certification stage (the mixture then
   contributes exactly nothing beyond the routed clones), micro-noise for
   training (so shared weights can actually receive gradient), or a clone
   of the source FFN as a provenance-uncertain control variant.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, compute_format
from .errors import ConfigError
from .model import (
    FFN_FIELDS,
    Model,
    ModelSpec,
    forward_model,
    zero_ffn,
)
from .precision import PrecisionPolicy
from .routing import GateSpec, init_gate

SHARED_INITS = ("verify_zero", "micro_noise", "clone_dense")


@dataclass(frozen=True)
class ConversionConfig:
    n_routed: int = 2
    n_shared: int = 1
    shared_init: str = "micro_noise"
    noise_sigma: float = 1e-4
    routed_scaling: float = 1.0
    gate: GateSpec = field(default_factory=GateSpec)
    seed: int = 0
    # Expert-structure overrides. None inherits the source structure, which
    # is the only value the structural check accepts.
    expert_activation: str | None = None
    expert_inner: int | None = None
    expert_bias: bool | None = None

    def __post_init__(self):
        if self.shared_init not in SHARED_INITS:
            raise ConfigError(f"shared_init must be one of {SHARED_INITS}")
        if self.n_routed < 1 or self.n_shared < 0:
            raise ConfigError("need n_routed >= 1 and n_shared >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_jsonable(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "n_routed", "n_shared", "shared_init", "noise_sigma",
            "routed_scaling", "seed", "expert_activation", "expert_inner",
            "expert_bias")}
        d["gate"] = self.gate.to_jsonable()
        return d

    @classmethod
    def from_jsonable(cls, d: dict) -> "ConversionConfig":
        d = dict(d)
        d["gate"] = GateSpec.from_jsonable(d.get("gate", {}))
        return cls(**d)


def check_structure(src: ModelSpec, cfg: ConversionConfig) -> None:
    """Refuse expert structures that do not match the dense source."""
    problems = []
    if cfg.expert_activation is not None and cfg.expert_activation != src.activation:
        problems.append(
            f"expert activation {cfg.expert_activation!r} != source {src.activation!r}; "
            "cloned weights only mean something in the source wiring"
        )
    if cfg.expert_inner is not None and cfg.expert_inner != src.inner:
        problems.append(
            f"expert inner width {cfg.expert_inner} != source {src.inner}"
        )
    if cfg.expert_bias is not None and cfg.expert_bias != src.ffn_bias:
        problems.append("expert bias layout differs from the source FFN")
    if problems:
        raise ConfigError("structural consistency violated: " + "; ".join(problems))


def clone_routed(src_params: dict[str, np.ndarray], prefix: str, n_routed: int) -> list[dict]:
    """n_routed bitwise copies of the source FFN at `prefix`."""
    return [
        {f: src_params[f"{prefix}.{f}"].copy() for f in FFN_FIELDS}
        for _ in range(n_routed)
    ]


def init_shared(
    hidden: int,
    inner: int,
    mode: str,
    sigma: float,
    rng: np.random.Generator,
    source: dict[str, np.ndarray] | None = None,
) -> dict:
    """One shared expert. Weight-only micro-noise keeps biases at zero so a
    zero-noise limit degrades exactly to verify_zero."""
    if mode == "verify_zero":
        return zero_ffn(hidden, inner)
    if mode == "micro_noise":
        return {
            "w1": rng.normal(0.0, sigma, (hidden, inner)),
            "b1": np.zeros((1, inner)),
            "w2": rng.normal(0.0, sigma, (inner, hidden)),
            "b2": np.zeros((1, hidden)),
        }
    if mode == "clone_dense":
        if source is None:
            raise ConfigError("clone_dense shared init needs the source FFN")
        return {f: source[f].copy() for f in FFN_FIELDS}
    raise ConfigError(f"unknown shared init {mode!r}")


def convert_model(dense: Model, cfg: ConversionConfig) -> Model:
    """Build the mixture model: cloned routed experts (frozen), fresh gate,
    shared experts per cfg. The dense source is left untouched."""
    if dense.spec.kind != "dense":
        raise ConfigError("conversion source must be a dense model")
    check_structure(dense.spec, cfg)

    spec = ModelSpec(
        hidden=dense.spec.hidden,
        inner=dense.spec.inner,
        n_layers=dense.spec.n_layers,
        kind="moe",
        activation=dense.spec.activation,
        ffn_bias=dense.spec.ffn_bias,
        n_routed=cfg.n_routed,
        n_shared=cfg.n_shared,
        routed_scaling=cfg.routed_scaling,
        gate=cfg.gate,
    )

    ss = np.random.SeedSequence([int(cfg.seed), 0x6D6F65])
    gate_streams = ss.spawn(dense.spec.n_layers)
    shared_streams = np.random.SeedSequence([int(cfg.seed), 0x736864]).spawn(dense.spec.n_layers)

    params: dict[str, np.ndarray] = {}
    frozen: set[str] = set()
    for i in range(dense.spec.n_layers):
        src_prefix = f"block{i}.ffn"
        source_ffn = {f: dense.params[f"{src_prefix}.{f}"] for f in FFN_FIELDS}
        for j, expert in enumerate(clone_routed(dense.params, src_prefix, cfg.n_routed)):
            for f in FFN_FIELDS:
                name = f"block{i}.routed{j}.{f}"
                params[name] = expert[f]
                frozen.add(name)
        shared_rng = np.random.default_rng(shared_streams[i])
        for j in range(cfg.n_shared):
            shared = init_shared(
                spec.hidden, spec.inner, cfg.shared_init, cfg.noise_sigma,
                shared_rng, source=source_ffn,
            )
            for f in FFN_FIELDS:
                params[f"block{i}.shared{j}.{f}"] = shared[f]
        gate = init_gate(cfg.gate, spec.hidden, cfg.n_routed, np.random.default_rng(gate_streams[i]))
        for gname, arr in gate.items():
            params[f"block{i}.gate.{gname}"] = arr

    return Model(spec=spec, params=params, frozen=frozen)


@dataclass
class EquivalenceReport:
    max_abs_dev: float
    threshold: float
    certified: bool
    probes: int
    compute: str

    def to_jsonable(self) -> dict:
        return {
            "max_abs_dev": self.max_abs_dev,
            "threshold": self.threshold,
            "certified": self.certified,
            "probes": self.probes,
            "compute": self.compute,
        }


def verify_equivalence(
    dense: Model,
    moe: Model,
    probes: int = 16,
    seed: int = 0,
    compute: str = "wide64",
) -> EquivalenceReport:
    """Max |moe(x) - dense(x)| over random probe batches.

    Preconditions (refused, because the comparison would be meaningless):
    the mixture must select every routed expert (top_k == n_routed, so the
    combine weights sum to exactly 1) and the shared experts must be
    all-zero. A non-unit routed scaling is *not* refused: it runs and fails
    certification, which is the point of the negative controls.
    """
    if moe.spec.kind != "moe" or dense.spec.kind != "dense":
        raise ConfigError("verify_equivalence compares a dense source to a mixture")
    if (dense.spec.hidden, dense.spec.inner, dense.spec.n_layers) != (
        moe.spec.hidden, moe.spec.inner, moe.spec.n_layers,
    ):
        raise ConfigError("models have different dimensions")
    if moe.spec.gate.top_k != moe.spec.n_routed:
        raise ConfigError(
            "equivalence requires top_k == n_routed: with experts dropped, the "
            "selected weights cannot sum to 1"
        )
    for name, arr in moe.params.items():
        if ".shared" in name and np.any(arr != 0.0):
            raise ConfigError(
                f"equivalence requires zero shared experts; {name} is nonzero "
                "(convert with shared_init='verify_zero' for certification)"
            )

    if compute not in ("wide64", "bf16"):
        raise ConfigError(f"compute must be wide64|bf16, got {compute!r}")
    threshold = 0.0 if compute == "wide64" else 1e-6
    policy = PrecisionPolicy(master_format="wide32", compute_format=compute)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x766671]))
    worst = 0.0
    ctx = compute_format("bf16") if compute == "bf16" else contextlib.nullcontext()
    with ctx:
        for _ in range(probes):
            x = rng.standard_normal((8, dense.spec.hidden))
            d_out = forward_model(Tape(), dense, x, policy=policy).output.data
            m_out = forward_model(Tape(), moe, x, policy=policy).output.data
            worst = max(worst, float(np.max(np.abs(m_out - d_out))))
    return EquivalenceReport(
        max_abs_dev=worst,
        threshold=threshold,
        certified=bool(worst <= threshold),
        probes=probes,
        compute=compute,
    )
