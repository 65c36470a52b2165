"""Optimizer, schedule, and the deterministic training loop.

The loop regresses the mixture model onto per-task teacher outputs (MSE)
plus the per-layer balance losses, updating only the trainable set (gate
and shared experts by default; routed experts stay frozen clones). All
randomness is keyed off the config seed, so identical configs produce
bitwise identical checkpoints and CSV files.

Parameter updates flow through precision.apply_update, which is where the
master-format story lives: wide32 masters accumulate exactly, bf16 masters
silently drop updates smaller than half a ULP of the parameter. Optimizer
moments are kept in the same master format.
"""

from __future__ import annotations

import contextlib
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, compute_format
from .config import config_hash
from .checkpoint import save_checkpoint
from .data import TaskSpec, gen_task_batch
from .errors import ConfigError, EvaluationError
from .model import Model, forward_model
from .precision import PrecisionPolicy, apply_update, bf16_round_array
from .routing import GATE_KINDS
from .telemetry import (
    RoutingLogger,
    homogenization_report,
    proportional_bands,
    summarize,
    write_utilization_csv,
)

FREEZE_POLICIES = ("gate_shared", "all")

LOSS_FIELDS = ("step", "task", "mse", "aux", "total", "lr", "shared_weight_norm")

_STREAM_TASKPICK = 0x7069636B
_STREAM_PROBE = 0x70726F62


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    warmup_steps: int = 500
    total_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_tokens: int = 512
    seq_len: int | None = None
    freeze: str = "gate_shared"
    shared_lr_mult: float = 1.0
    log_interval: int = 50
    seed: int = 123

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        # total_steps 0 is allowed (header-only dry run); otherwise the
        # cosine span must be nonempty.
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be < total_steps")
        if self.batch_tokens < 1 or self.log_interval < 1:
            raise ConfigError("batch_tokens and log_interval must be >= 1")
        if self.freeze not in FREEZE_POLICIES:
            raise ConfigError(f"freeze must be one of {FREEZE_POLICIES}")
        if self.shared_lr_mult <= 0:
            raise ConfigError("shared_lr_mult must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to 0 at total_steps."""
    if t < 0 or t > max(cfg.total_steps, cfg.warmup_steps):
        raise ConfigError(f"step {t} outside schedule range")
    if t < cfg.warmup_steps:
        return cfg.lr * t / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (t - cfg.warmup_steps) / span))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter subset.

    Moments live in the master format: under a bf16 master policy they are
    re-quantized after every update, same as the parameters themselves.
    Steps with any non-finite gradient are skipped whole, with a
    diagnostic entry instead of an update.
    """

    def __init__(self, names: list[str], model: Model, cfg: TrainConfig,
                 policy: PrecisionPolicy):
        self.names = list(names)
        self.cfg = cfg
        self.policy = policy
        self.t = 0
        self.m = {n: np.zeros_like(model.params[n]) for n in self.names}
        self.v = {n: np.zeros_like(model.params[n]) for n in self.names}

    def _store(self, moments: np.ndarray) -> np.ndarray:
        if self.policy.master_format == "bf16":
            return bf16_round_array(moments)
        return moments

    def lr_mult(self, name: str) -> float:
        return self.cfg.shared_lr_mult if ".shared" in name else 1.0

    def step(self, model: Model, grads: dict[str, np.ndarray], lr_t: float) -> dict:
        bad = [n for n in self.names if not np.isfinite(grads[n]).all()]
        if bad:
            return {"skipped": True, "step": self.t + 1, "non_finite_grads": bad}
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = self._store(b1 * self.m[n] + (1.0 - b1) * g)
            self.v[n] = self._store(b2 * self.v[n] + (1.0 - b2) * g * g)
            m_hat = self.m[n] / c1
            v_hat = self.v[n] / c2
            lr_n = lr_t * self.lr_mult(n)
            delta = -lr_n * (m_hat / (np.sqrt(v_hat) + self.cfg.eps))
            if self.cfg.weight_decay != 0.0:
                delta = delta - lr_n * self.cfg.weight_decay * model.params[n]
            model.params[n] = apply_update(model.params[n], delta, self.policy)
        return {"skipped": False, "step": self.t}


def shared_weight_norm(model: Model) -> float:
    """Frobenius norm over shared-expert weight matrices (biases excluded:
    a zero-init shared expert's biases can still train, its weights cannot)."""
    total = 0.0
    for name, arr in model.params.items():
        if ".shared" in name and name.rsplit(".", 1)[1] in ("w1", "w2"):
            total += float(np.sum(arr * arr))
    return math.sqrt(total)


@dataclass
class TrainResult:
    model: Model
    run_dir: str
    steps_run: int
    diagnostics: list = field(default_factory=list)
    report: dict = field(default_factory=dict)
    losses_path: str = ""
    utilization_path: str = ""
    checkpoint_dir: str = ""


def run_dir_for(cfg_dict: dict, seed: int, root=None) -> str:
    root = root or os.environ.get("MOELAB_RUN_ROOT", "runs")
    return os.path.join(root, f"{config_hash(cfg_dict)}-seed{seed}")


def _dump_abort_state(run_dir: str, step: int, task_id: int, model: Model) -> str:
    path = os.path.join(run_dir, "abort.json")
    norms = {n: float(np.linalg.norm(p)) for n, p in model.params.items()}
    with open(path, "w") as fh:
        json.dump({"step": step, "task": task_id, "param_norms": norms}, fh, indent=2)
    return path


def train(
    model: Model,
    tasks: list[TaskSpec],
    cfg: TrainConfig,
    policy: PrecisionPolicy,
    run_dir: str,
    *,
    telemetry_cfg: dict | None = None,
) -> TrainResult:
    if model.spec.kind != "moe":
        raise ConfigError("train expects a converted mixture model")
    if not tasks:
        raise ConfigError("need at least one task")
    if model.spec.gate.kind not in GATE_KINDS:
        raise ConfigError(f"unknown gate kind {model.spec.gate.kind!r}")
    tel = dict(telemetry_cfg or {})
    os.makedirs(run_dir, exist_ok=True)

    if cfg.freeze == "all":
        model.frozen = set()
    trainable = model.trainable_names()
    if not trainable:
        raise ConfigError("freeze policy left nothing trainable")

    opt = AdamW(trainable, model, cfg, policy)
    logger = RoutingLogger(model.spec.n_layers, model.spec.n_routed,
                           tel.get("interval", cfg.log_interval))
    pick_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, _STREAM_TASKPICK]))
    ctx = (compute_format("bf16") if policy.compute_format == "bf16"
           else contextlib.nullcontext())

    diagnostics: list[dict] = []
    loss_rows: list[list] = []

    with ctx:
        for step in range(1, cfg.total_steps + 1):
            task = tasks[int(pick_rng.integers(0, len(tasks)))]
            x, targets, states = gen_task_batch(task, cfg.batch_tokens, step)
            lr_t = lr_schedule(step, cfg)

            tape = Tape()
            result = forward_model(
                tape, model, x, policy=policy, training=True,
                encoder_states=states, seq_len=cfg.seq_len,
            )
            mse = tape.mse(result.output, targets)
            aux_total = None
            for a in result.aux_losses:
                aux_total = a if aux_total is None else tape.add(aux_total, a)
            loss = mse if aux_total is None else tape.add(mse, aux_total)

            if not np.isfinite(loss.item()):
                dump = _dump_abort_state(run_dir, step, task.task_id, model)
                raise EvaluationError(
                    f"non-finite loss at step {step}; state dumped to {dump}"
                )
            tape.backward(loss)

            grads = {n: result.bound[n].grad for n in trainable}
            info = opt.step(model, grads, lr_t)
            if info["skipped"]:
                diagnostics.append({"step": step, **info})

            for layer, decision in enumerate(result.decisions):
                logger.observe(layer, decision.indices, decision.weights.data)
            if step % logger.interval == 0:
                logger.flush(step)

            loss_rows.append([
                step, task.task_id,
                repr(float(mse.item())),
                repr(0.0 if aux_total is None else float(aux_total.item())),
                repr(float(loss.item())),
                repr(lr_t),
                repr(shared_weight_norm(model)),
            ])

    if logger.has_pending():
        logger.flush(cfg.total_steps)

    losses_path = os.path.join(run_dir, "losses.csv")
    with open(losses_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_FIELDS)
        w.writerows(loss_rows)

    util_path = os.path.join(run_dir, "utilization.csv")
    write_utilization_csv(logger.records, util_path)

    bands = tel.get("bands") or proportional_bands(model.spec.n_layers)
    report = summarize(
        logger.records, model.spec.n_layers,
        bands=bands,
        t_dead=tel.get("t_dead", 0.10),
        t_skew=tel.get("t_skew", 0.30),
        t_health=tel.get("t_health", 0.10),
        window_intervals=tel.get("window_intervals", 4),
    )
    probe_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, _STREAM_PROBE]))
    probe = probe_rng.standard_normal((32, model.spec.hidden))
    report["homogenization"] = homogenization_report(model, probe)
    report_path = os.path.join(run_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")

    ckpt_dir = os.path.join(run_dir, "checkpoint")
    save_checkpoint(model, ckpt_dir, extra={"steps": cfg.total_steps})

    return TrainResult(
        model=model,
        run_dir=run_dir,
        steps_run=cfg.total_steps,
        diagnostics=diagnostics,
        report=report,
        losses_path=losses_path,
        utilization_path=util_path,
        checkpoint_dir=ckpt_dir,
    )
