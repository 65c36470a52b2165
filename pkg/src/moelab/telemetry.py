"""Routing telemetry: utilization recording, deadlock classification,
layer banding, rebound detection, and the training-memory estimator.

The central quantity is the minority fraction: the share of assignments
(or combine-weight mass) received by the least-used expert of a layer,
in [0, 0.5] for two experts. A layer whose windowed minority fraction sits
below ``t_dead`` is deep-deadlocked, below ``t_skew`` merely skewed, and
healthy otherwise. Rebound detection scans each layer's fraction series
for a sustained dip below ``t_dead`` followed by a recovery above
``t_health``; a bump inside a dip that never reaches ``t_health`` is
reported as an oscillation instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .model import Model, expert_output_similarity

CSV_FIELDS = ("step", "layer", "expert", "count", "weight_mass", "tokens")

T_DEAD = 0.10
T_SKEW = 0.30
T_HEALTH = 0.10
DIP_MIN_INTERVALS = 2

STATUSES = ("healthy", "skewed", "deep_deadlock")

# Shallow / mid / deep layer bands for two stack depths that show the
# shallow-and-deep concentration pattern. Desk-size stacks use
# proportional_bands instead.
BAND_PRESETS = {
    "stack30": ((1, 8), (9, 22), (23, 30)),
    "stack25": ((1, 10), (11, 17), (18, 25)),
}


@dataclass(frozen=True)
class UtilizationRecord:
    """Per-layer expert usage accumulated over one logging interval."""

    step: int
    layer: int
    counts: np.ndarray       # (E,) assignments per expert
    weight_mass: np.ndarray  # (E,) summed combine weights per expert
    tokens: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        mass = np.asarray(self.weight_mass, dtype=np.float64)
        if counts.shape != mass.shape or counts.ndim != 1:
            raise ShapeError("counts and weight_mass must be matching 1-D arrays")
        if (counts < 0).any() or (mass < 0).any() or self.tokens < 0:
            raise ConfigError("utilization entries must be non-negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "weight_mass", mass)


class RoutingLogger:
    """Accumulates routing decisions and emits one record per layer per
    logging interval. Single-consumer: the training loop observes every
    step and flushes at interval boundaries; flushed records are final."""

    def __init__(self, n_layers: int, n_experts: int, interval: int = 50):
        if n_layers < 1 or n_experts < 1 or interval < 1:
            raise ConfigError("n_layers, n_experts and interval must be >= 1")
        self.n_layers = n_layers
        self.n_experts = n_experts
        self.interval = interval
        self.records: list[UtilizationRecord] = []
        self._reset()

    def _reset(self):
        self._counts = np.zeros((self.n_layers, self.n_experts), dtype=np.int64)
        self._mass = np.zeros((self.n_layers, self.n_experts))
        self._tokens = np.zeros(self.n_layers, dtype=np.int64)

    def observe(self, layer: int, indices: np.ndarray, weights: np.ndarray) -> None:
        indices = np.asarray(indices)
        weights = np.asarray(weights, dtype=np.float64)
        if indices.shape != weights.shape or indices.ndim != 2:
            raise ShapeError("indices and weights must be matching (T, k) arrays")
        self._counts[layer] += np.bincount(indices.ravel(), minlength=self.n_experts)
        np.add.at(self._mass[layer], indices.ravel(), weights.ravel())
        self._tokens[layer] += indices.shape[0]

    def flush(self, step: int) -> list[UtilizationRecord]:
        """Seal the current interval, stamping its records with `step`."""
        out = [
            UtilizationRecord(
                step=step,
                layer=layer,
                counts=self._counts[layer].copy(),
                weight_mass=self._mass[layer].copy(),
                tokens=int(self._tokens[layer]),
            )
            for layer in range(self.n_layers)
        ]
        self.records.extend(out)
        self._reset()
        return out

    def has_pending(self) -> bool:
        return bool(self._tokens.any())


def aggregate(window: list[UtilizationRecord]) -> UtilizationRecord:
    """Sum a window of records for one layer into a single record."""
    if not window:
        raise ConfigError("cannot aggregate an empty window")
    layer = window[0].layer
    if any(r.layer != layer for r in window):
        raise ConfigError("aggregate needs records from a single layer")
    return UtilizationRecord(
        step=window[-1].step,
        layer=layer,
        counts=np.sum([r.counts for r in window], axis=0),
        weight_mass=np.sum([r.weight_mass for r in window], axis=0),
        tokens=int(sum(r.tokens for r in window)),
    )


def _shares(record: UtilizationRecord, channel: str) -> np.ndarray | None:
    if channel == "counts":
        total = record.counts.sum()
        return record.counts / total if total > 0 else None
    if channel == "mass":
        total = record.weight_mass.sum()
        return record.weight_mass / total if total > 0 else None
    raise ConfigError(f"channel must be counts|mass, got {channel!r}")


def minority_fraction(record: UtilizationRecord, channel: str = "counts") -> float:
    """Smallest per-expert share on the chosen channel; NaN when the record
    saw no tokens."""
    shares = _shares(record, channel)
    return float("nan") if shares is None else float(shares.min())


def std_utilization(record: UtilizationRecord, channel: str = "counts") -> float:
    """Population std of the per-expert shares (|p - 0.5| for two experts)."""
    shares = _shares(record, channel)
    return float("nan") if shares is None else float(np.std(shares))


@dataclass
class LayerHealth:
    layer: int
    minority_fraction_counts: float
    minority_fraction_mass: float
    std: float
    status: str
    window: list[UtilizationRecord] = field(default_factory=list, repr=False)

    def to_jsonable(self) -> dict:
        def clean(v: float):
            return None if np.isnan(v) else v

        return {
            "layer": self.layer,
            "minority_fraction_counts": clean(self.minority_fraction_counts),
            "minority_fraction_mass": clean(self.minority_fraction_mass),
            "std": clean(self.std),
            "status": self.status,
        }


def classify_fraction(fraction: float, *, t_dead: float = T_DEAD, t_skew: float = T_SKEW) -> str:
    if np.isnan(fraction):
        return "healthy"  # no evidence is not evidence of deadlock
    if fraction < t_dead:
        return "deep_deadlock"
    if fraction < t_skew:
        return "skewed"
    return "healthy"


def classify_layer(
    window: list[UtilizationRecord],
    *,
    t_dead: float = T_DEAD,
    t_skew: float = T_SKEW,
    channel: str = "counts",
) -> str:
    """Status from the windowed (aggregated) minority fraction."""
    return classify_fraction(
        minority_fraction(aggregate(window), channel), t_dead=t_dead, t_skew=t_skew
    )


def layer_health(
    window: list[UtilizationRecord],
    *,
    t_dead: float = T_DEAD,
    t_skew: float = T_SKEW,
) -> LayerHealth:
    agg = aggregate(window)
    return LayerHealth(
        layer=agg.layer,
        minority_fraction_counts=minority_fraction(agg, "counts"),
        minority_fraction_mass=minority_fraction(agg, "mass"),
        std=std_utilization(agg, "counts"),
        status=classify_fraction(
            minority_fraction(agg, "counts"), t_dead=t_dead, t_skew=t_skew
        ),
        window=list(window),
    )


@dataclass(frozen=True)
class RoutingEvent:
    kind: str  # rebound | oscillation
    layer: int
    dip_start: int
    recovery_step: int | None  # rebound: first step above t_health
    peak_step: int
    peak: float

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "layer": self.layer,
            "dip_start": self.dip_start,
            "recovery_step": self.recovery_step,
            "peak_step": self.peak_step,
            "peak": self.peak,
        }


def detect_rebound(
    fractions,
    steps=None,
    *,
    layer: int = 0,
    t_dead: float = T_DEAD,
    t_health: float = T_HEALTH,
    min_intervals: int = DIP_MIN_INTERVALS,
) -> list[RoutingEvent]:
    """Scan one layer's minority-fraction series for recovery events.

    A dip opens when the fraction drops below t_dead and closes at the
    first value above t_health. Dips lasting >= min_intervals that close
    yield a rebound event (peak = maximum until the fraction next drops
    below t_dead, or the series ends). Strict local maxima inside a dip
    that stay at or below t_health yield oscillation events.
    """
    f = [float(v) for v in fractions]
    steps = list(range(len(f))) if steps is None else [int(s) for s in steps]
    if len(steps) != len(f):
        raise ShapeError("fractions and steps must have equal length")

    events: list[RoutingEvent] = []
    i = 0
    n = len(f)
    while i < n:
        if f[i] >= t_dead:
            i += 1
            continue
        dip_start = i
        below = 1  # longest run of consecutive sub-t_dead intervals in the dip
        run = 1
        j = i + 1
        while j < n and not f[j] > t_health:
            if f[j] < t_dead:
                run += 1
                below = max(below, run)
            else:
                run = 0
            j += 1
        # oscillations: local maxima strictly inside [dip_start, j)
        for m in range(dip_start + 1, j - 1):
            if f[m - 1] < f[m] > f[m + 1]:
                events.append(RoutingEvent(
                    kind="oscillation", layer=layer, dip_start=steps[dip_start],
                    recovery_step=None, peak_step=steps[m], peak=f[m],
                ))
        if j < n and below >= min_intervals:
            peak_i = j
            m = j
            while m < n and f[m] >= t_dead:
                if f[m] > f[peak_i]:
                    peak_i = m
                m += 1
            events.append(RoutingEvent(
                kind="rebound", layer=layer, dip_start=steps[dip_start],
                recovery_step=steps[j], peak_step=steps[peak_i], peak=f[peak_i],
            ))
        i = j + 1 if j < n else n
    return events


@dataclass
class BandReport:
    bands: tuple  # three (lo, hi) inclusive 1-based layer ranges
    deadlock_counts: tuple  # per band
    u_shape: bool

    def to_jsonable(self) -> dict:
        return {
            "bands": [list(b) for b in self.bands],
            "deadlock_counts": list(self.deadlock_counts),
            "u_shape": self.u_shape,
        }


def proportional_bands(n_layers: int) -> tuple:
    """Split [1, n_layers] into shallow/mid/deep thirds, as even as possible."""
    if n_layers < 3:
        raise ConfigError("banding needs at least 3 layers")
    cuts = [round(n_layers * i / 3) for i in range(4)]
    return tuple((cuts[i] + 1, cuts[i + 1]) for i in range(3))


def band_summary(statuses: list[str], bands) -> BandReport:
    """Per-band deep-deadlock counts over 1-based layer statuses.

    U-shape verdict: the shallow and deep bands each hold strictly more
    deadlocked layers than the mid band.
    """
    bands = tuple((int(lo), int(hi)) for lo, hi in bands)
    if len(bands) != 3:
        raise ConfigError("band summary expects exactly shallow/mid/deep bands")
    n = len(statuses)
    covered = []
    for lo, hi in bands:
        if lo > hi:
            raise ConfigError(f"band {lo}-{hi} is empty")
        covered.extend(range(lo, hi + 1))
    if sorted(covered) != list(range(1, n + 1)):
        raise ConfigError(
            f"bands {bands} do not partition layers 1-{n} (overlap or gap)"
        )
    counts = tuple(
        sum(1 for layer in range(lo, hi + 1) if statuses[layer - 1] == "deep_deadlock")
        for lo, hi in bands
    )
    u_shape = counts[0] > counts[1] and counts[2] > counts[1]
    return BandReport(bands=bands, deadlock_counts=counts, u_shape=u_shape)


def homogenization_report(model: Model, probe_tokens: np.ndarray) -> list[dict]:
    """Pairwise routed-expert output cosines for every block, JSON-ready."""
    out = []
    for i in range(model.spec.n_layers):
        rep = expert_output_similarity(model, i, probe_tokens)
        out.append({
            "layer": i,
            "pairs": {f"{a}-{b}": v for (a, b), v in rep["pairs"].items()},
            "skipped_pairs": [list(p) for p in rep["skipped_pairs"]],
        })
    return out


# --- time-series files --------------------------------------------------------


def write_utilization_csv(records: list[UtilizationRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            for e in range(len(r.counts)):
                w.writerow([r.step, r.layer, e, int(r.counts[e]),
                            repr(float(r.weight_mass[e])), r.tokens])


def read_utilization_csv(path) -> list[UtilizationRecord]:
    rows: dict[tuple[int, int], dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(CSV_FIELDS):
            raise ConfigError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            key = (int(row["step"]), int(row["layer"]))
            cell = rows.setdefault(key, {"experts": {}, "tokens": int(row["tokens"])})
            cell["experts"][int(row["expert"])] = (
                int(row["count"]), float(row["weight_mass"])
            )
    records = []
    for (step, layer), cell in sorted(rows.items()):
        n_e = max(cell["experts"]) + 1
        counts = np.zeros(n_e, dtype=np.int64)
        mass = np.zeros(n_e)
        for e, (c, m) in cell["experts"].items():
            counts[e], mass[e] = c, m
        records.append(UtilizationRecord(step, layer, counts, mass, cell["tokens"]))
    return records


def summarize(
    records: list[UtilizationRecord],
    n_layers: int,
    *,
    bands=None,
    t_dead: float = T_DEAD,
    t_skew: float = T_SKEW,
    t_health: float = T_HEALTH,
    window_intervals: int = 4,
) -> dict:
    """Per-layer health, band verdict, and rebound events from a record set.

    Status uses the trailing `window_intervals` records of each layer;
    rebound detection uses each layer's full fraction series.
    """
    by_layer: dict[int, list[UtilizationRecord]] = {i: [] for i in range(n_layers)}
    for r in records:
        by_layer.setdefault(r.layer, []).append(r)

    layers = []
    statuses = []
    rebounds: list[RoutingEvent] = []
    for layer in range(n_layers):
        series = sorted(by_layer[layer], key=lambda r: r.step)
        if not series:
            health = LayerHealth(layer, float("nan"), float("nan"), float("nan"), "healthy")
        else:
            health = layer_health(series[-window_intervals:], t_dead=t_dead, t_skew=t_skew)
        layers.append(health.to_jsonable())
        statuses.append(health.status)
        fractions = [minority_fraction(r) for r in series]
        rebounds.extend(detect_rebound(
            fractions, [r.step for r in series], layer=layer,
            t_dead=t_dead, t_health=t_health,
        ))

    bands = proportional_bands(n_layers) if bands is None else bands
    return {
        "layers": layers,
        "bands": band_summary(statuses, bands).to_jsonable(),
        "rebounds": [e.to_jsonable() for e in rebounds],
    }


# --- memory estimator ----------------------------------------------------------

BYTES_BF16 = 2
BYTES_F32 = 4
BYTES_GRAD = 4
BYTES_OPT8 = 2  # two optimizer states at 1 byte each


@dataclass(frozen=True)
class MemoryRow:
    name: str
    params: int | None  # None for rows given directly in GB
    bf16_gb: float
    f32_gb: float
    grads_gb: float
    opt_gb: float

    @property
    def total_gb(self) -> float:
        # The bf16 compute copy is transient and not counted in the
        # steady-state total; masters, gradients and optimizer states are.
        return self.f32_gb + self.grads_gb + self.opt_gb

    def to_jsonable(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "bf16_gb": self.bf16_gb,
            "f32_gb": self.f32_gb,
            "grads_gb": self.grads_gb,
            "opt_gb": self.opt_gb,
            "total_gb": self.total_gb,
        }


@dataclass(frozen=True)
class MemoryReport:
    rows: tuple
    total_gb: float

    def to_jsonable(self) -> dict:
        return {"rows": [r.to_jsonable() for r in self.rows], "total_gb": self.total_gb}


def param_row(name: str, params: float) -> MemoryRow:
    """Trainable-component row: every column derived from the param count.
    GB means 1e9 bytes."""
    if params < 0:
        raise ConfigError("param count must be >= 0")
    n = float(params)
    return MemoryRow(
        name=name,
        params=int(n),
        bf16_gb=n * BYTES_BF16 / 1e9,
        f32_gb=n * BYTES_F32 / 1e9,
        grads_gb=n * BYTES_GRAD / 1e9,
        opt_gb=n * BYTES_OPT8 / 1e9,
    )


def fixed_row(name: str, bf16_gb: float, f32_gb: float, grads_gb: float = 0.0,
              opt_gb: float = 0.0) -> MemoryRow:
    """Row for components budgeted directly in GB (frozen weights,
    activations) rather than derived from a parameter count."""
    return MemoryRow(name, None, bf16_gb, f32_gb, grads_gb, opt_gb)


def estimate_memory(rows: list[MemoryRow]) -> MemoryReport:
    return MemoryReport(rows=tuple(rows), total_gb=float(sum(r.total_gb for r in rows)))
