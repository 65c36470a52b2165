"""Synthetic multi-task data: nine Gaussian-mixture token sources, each
with its own frozen random teacher stack defining regression targets and a
fixed instruction-state sequence for the cross-attention gate.

The tasks stand in for a heterogeneous multi-task corpus: distinct input
clusters and distinct target functions per task are what stress a router.
Teachers get a mild output gain (default 1.3) so a single cloned expert at
combine weight <= 1 underfits the target, keeping pressure on the gate.
Everything is fully determined by (task_id, global seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import Model, ModelSpec, forward_numpy, init_dense_model

N_TASKS = 9

_STREAM_TASK = 0x6D697874  # task construction streams
_STREAM_BATCH = 0x62746368  # per-step batch streams


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    global_seed: int
    means: np.ndarray               # (components, hidden) mixture centers
    token_sigma: float              # shared isotropic component std
    instruction_states: np.ndarray  # (S, encoder_dim), fixed per task
    teacher: Model                  # frozen dense stack, targets = teacher(x)

    def __post_init__(self):
        if not (1 <= self.task_id <= N_TASKS):
            raise ConfigError(f"task_id must be in [1, {N_TASKS}], got {self.task_id}")
        self.means.setflags(write=False)
        self.instruction_states.setflags(write=False)

    def mixture_mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    def mixture_var(self) -> np.ndarray:
        """Per-dimension token variance: sigma^2 plus between-center spread."""
        centered = self.means - self.mixture_mean()
        return self.token_sigma ** 2 + (centered ** 2).mean(axis=0)


def build_task(
    task_id: int,
    global_seed: int,
    *,
    hidden: int = 64,
    inner: int = 256,
    teacher_layers: int = 6,
    encoder_dim: int = 64,
    n_components: int = 3,
    token_sigma: float = 0.5,
    mean_scale: float = 2.0,
    teacher_gain: float = 1.3,
    instruction_len: int = 4,
) -> TaskSpec:
    root = np.random.SeedSequence([int(global_seed), _STREAM_TASK, int(task_id)])
    mean_ss, instr_ss, teacher_ss = root.spawn(3)

    means = np.random.default_rng(mean_ss).normal(0.0, mean_scale, (n_components, hidden))
    states = np.random.default_rng(instr_ss).standard_normal((instruction_len, encoder_dim))

    teacher = init_dense_model(
        ModelSpec(hidden=hidden, inner=inner, n_layers=teacher_layers),
        np.random.default_rng(teacher_ss),
    )
    for i in range(teacher_layers):
        teacher.params[f"block{i}.ffn.w2"] *= teacher_gain
    teacher.frozen = set(teacher.params)

    return TaskSpec(
        task_id=task_id,
        global_seed=int(global_seed),
        means=means,
        token_sigma=float(token_sigma),
        instruction_states=states,
        teacher=teacher,
    )


def build_tasks(global_seed: int, **kw) -> list[TaskSpec]:
    return [build_task(i, global_seed, **kw) for i in range(1, N_TASKS + 1)]


def gen_task_batch(
    task: TaskSpec, n_tokens: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample (tokens, targets, instruction_states) for one step.

    `seed` is typically the step number; the stream is keyed on
    (global_seed, task_id, seed) so batches repeat exactly across runs.
    """
    if n_tokens < 1:
        raise ConfigError("n_tokens must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(
        [task.global_seed, _STREAM_BATCH, task.task_id, int(seed)]
    ))
    comp = rng.integers(0, task.means.shape[0], size=n_tokens)
    tokens = task.means[comp] + task.token_sigma * rng.standard_normal(
        (n_tokens, task.means.shape[1])
    )
    targets = forward_numpy(task.teacher, tokens)
    return tokens, targets, task.instruction_states
