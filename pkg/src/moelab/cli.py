"""Command-line front end.

Subcommands: convert, verify, train, audit-bf16, report, estimate-memory.
Every command takes --config (JSON file, merged over defaults) and
repeated --set section.field=value overrides. Operational failures print
one {"error": ...} JSON object to stderr and exit 1; bad usage exits 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .checkpoint import save_checkpoint
from .config import apply_overrides, load_config
from .convert import ConversionConfig, convert_model, verify_equivalence
from .data import build_tasks
from .model import ModelSpec, init_dense_model
from .precision import PrecisionPolicy, audit_truncation
from .routing import GateSpec
from .telemetry import (
    estimate_memory,
    fixed_row,
    param_row,
    proportional_bands,
    read_utilization_csv,
    summarize,
)
from .training import TrainConfig, run_dir_for, train

# Full-expert training footprint: the documented single-card scenario the
# estimator must reproduce (counts in parameters, fixed rows in GB).
DEFAULT_MEMORY_SCENARIO = (
    ("routed_experts", 2_640_000_000),
    ("shared_experts", 1_320_000_000),
    ("gate", 1_120_000_000),
    ("frozen_components", (20.0, 20.0)),
    ("activations", (10.0, 10.0)),
)


def _load(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def _dense_spec(cfg: dict) -> ModelSpec:
    return ModelSpec(kind="dense", **cfg["model"])


def _gate_spec(cfg: dict) -> GateSpec:
    return GateSpec(**cfg["gate"])


def _conversion(cfg: dict) -> ConversionConfig:
    return ConversionConfig(gate=_gate_spec(cfg), **cfg["conversion"])


def _policy(cfg: dict) -> PrecisionPolicy:
    return PrecisionPolicy(**cfg["precision"])


def _train_config(cfg: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {k: v for k, v in cfg["train"].items() if k in fields}
    return TrainConfig(**kw)


def _build_dense(cfg: dict, dense_seed: int):
    return init_dense_model(_dense_spec(cfg), np.random.default_rng(dense_seed))


def cmd_convert(args) -> int:
    cfg = _load(args)
    dense = _build_dense(cfg, args.dense_seed)
    moe = convert_model(dense, _conversion(cfg))
    save_checkpoint(moe, args.out, extra={"dense_seed": args.dense_seed})
    print(json.dumps({
        "out": args.out,
        "params": moe.param_count(),
        "frozen": len(moe.frozen),
        "n_layers": moe.spec.n_layers,
    }))
    return 0


def cmd_verify(args) -> int:
    cfg = _load(args)
    dense = _build_dense(cfg, args.dense_seed)
    moe = convert_model(dense, _conversion(cfg))
    report = verify_equivalence(
        dense, moe, probes=args.probes, seed=args.probe_seed,
        compute=args.compute,
    )
    verdict = "equivalent" if report.certified else "not equivalent"
    print(json.dumps({"max_abs_dev": report.max_abs_dev, "verdict": verdict}))
    return 0 if report.certified else 1


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.steps is not None:
        cfg["train"]["total_steps"] = args.steps
    tcfg = _train_config(cfg)
    tasks = build_tasks(
        cfg["train"]["data_seed"],
        hidden=cfg["model"]["hidden"],
        inner=cfg["model"]["inner"],
        teacher_layers=cfg["train"]["teacher_layers"],
        teacher_gain=cfg["train"]["teacher_gain"],
        encoder_dim=cfg["gate"]["encoder_dim"],
    )
    dense = _build_dense(cfg, args.dense_seed)
    moe = convert_model(dense, _conversion(cfg))
    run_dir = run_dir_for(cfg, tcfg.seed, root=args.run_root)
    result = train(moe, tasks, tcfg, _policy(cfg), run_dir,
                   telemetry_cfg=cfg["telemetry"])
    print(json.dumps({
        "run_dir": result.run_dir,
        "steps": result.steps_run,
        "skipped_steps": len(result.diagnostics),
        "losses": result.losses_path,
        "utilization": result.utilization_path,
        "checkpoint": result.checkpoint_dir,
    }))
    return 0


def cmd_audit_bf16(args) -> int:
    magnitudes = [float(m) for m in args.magnitudes.split(",") if m.strip()]
    report = audit_truncation(args.lr, args.grad_scale, magnitudes)
    if args.json:
        print(json.dumps(report.to_jsonable()))
        return 0
    print(f"lr={report.lr:g} grad_scale={report.grad_scale:g} "
          f"update={abs(report.lr * report.grad_scale):g}")
    print(f"{'magnitude':>12}  {'spacing':>12}  {'update':>12}  verdict")
    for row in report.rows:
        print(f"{row.magnitude:>12g}  {row.spacing:>12g}  "
              f"{row.update:>12g}  {row.verdict}")
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    tel = cfg["telemetry"]
    records = read_utilization_csv(os.path.join(args.run_dir, "utilization.csv"))
    if records:
        n_layers = max(r.layer for r in records) + 1
    else:
        n_layers = cfg["model"]["n_layers"]
    summary = summarize(
        records, n_layers,
        bands=tel["bands"] or proportional_bands(n_layers),
        t_dead=tel["t_dead"], t_skew=tel["t_skew"], t_health=tel["t_health"],
        window_intervals=tel["window_intervals"],
    )
    if args.json:
        print(json.dumps(summary))
        return 0
    print(f"{'layer':>5}  {'minority(counts)':>16}  {'minority(mass)':>14}  "
          f"{'std':>8}  status")
    for row in summary["layers"]:
        mc = row["minority_fraction_counts"]
        mm = row["minority_fraction_mass"]
        sd = row["std"]
        print(f"{row['layer']:>5}  "
              f"{'-' if mc is None else format(mc, '.4f'):>16}  "
              f"{'-' if mm is None else format(mm, '.4f'):>14}  "
              f"{'-' if sd is None else format(sd, '.4f'):>8}  {row['status']}")
    bands = summary["bands"]
    names = ("shallow", "mid", "deep")
    parts = [
        f"{name} {lo}-{hi}: {n} deadlocked"
        for name, (lo, hi), n in zip(names, bands["bands"], bands["deadlock_counts"])
    ]
    print("bands: " + " | ".join(parts)
          + f" | u_shape={'yes' if bands['u_shape'] else 'no'}")
    print(f"rebounds: {len(summary['rebounds'])}")
    return 0


def cmd_estimate_memory(args) -> int:
    rows = []
    specs = args.row or [f"{name}={val}" if not isinstance(val, tuple)
                         else f"{name}={val[0]}:{val[1]}"
                         for name, val in DEFAULT_MEMORY_SCENARIO]
    for item in specs:
        name, _, raw = item.partition("=")
        if not raw:
            raise ValueError(f"row {item!r} is not of the form name=params"
                             " or name=bf16_gb:f32_gb")
        if ":" in raw:
            bf16_gb, f32_gb = (float(v) for v in raw.split(":", 1))
            rows.append(fixed_row(name, bf16_gb, f32_gb))
        else:
            rows.append(param_row(name, float(raw)))
    report = estimate_memory(rows)
    if args.json:
        print(json.dumps(report.to_jsonable()))
        return 0
    print(f"{'component':<20} {'params':>14} {'bf16_gb':>8} {'f32_gb':>8} "
          f"{'grads_gb':>9} {'opt_gb':>7} {'total_gb':>9}")
    for r in report.rows:
        params = "-" if r.params is None else f"{r.params:.2e}"
        print(f"{r.name:<20} {params:>14} {r.bf16_gb:>8.2f} {r.f32_gb:>8.2f} "
              f"{r.grads_gb:>9.2f} {r.opt_gb:>7.2f} {r.total_gb:>9.2f}")
    print(f"{'total':<20} {'':>14} {'':>8} {'':>8} {'':>9} {'':>7} "
          f"{report.total_gb:>9.2f}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file merged over defaults")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                   help="override a config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="dense-to-mixture conversion lab: convert, verify, "
                    "train, and inspect routing health",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a seeded dense stack and save it")
    _add_common(p)
    p.add_argument("--dense-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("verify", help="certify conversion equivalence")
    _add_common(p)
    p.add_argument("--dense-seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--compute", choices=("wide64", "bf16"), default="wide64")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("train", help="run the training loop")
    _add_common(p)
    p.add_argument("--dense-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None,
                   help="override train.total_steps")
    p.add_argument("--run-root", default=None,
                   help="parent directory for run output "
                        "(default: $MOELAB_RUN_ROOT or ./runs)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("audit-bf16",
                       help="predict which update sizes a bf16 master swallows")
    p.add_argument("--lr", type=float, default=0.04)
    p.add_argument("--grad-scale", type=float, default=0.005)
    p.add_argument("--magnitudes", default="0.01,1.0,115.5,1000.0")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_audit_bf16)

    p = sub.add_parser("report", help="render routing health from a run directory")
    _add_common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("estimate-memory",
                       help="per-component training memory footprint")
    p.add_argument("--row", action="append", metavar="NAME=PARAMS|NAME=BF16:F32",
                   help="replace the default scenario (repeatable)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_estimate_memory)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(json.dumps({"error": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
