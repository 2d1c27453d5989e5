"""Command-line front end.

Subcommands: simulate, evaluate, fit, apply, align, window-search, report.
Every command is deterministic given its inputs, flags, and seed; exit codes
are 0 on success, 2 on usage/data errors, 3 on numerical failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import calmaps, groundtruth, statmath, systems, traceio
from .calmaps import (
    LOSS_WEIGHT_PRESETS,
    MLP_PRESETS,
    TrainingSet,
    fit_matrix,
    fit_scalar,
    train_mlp,
    uniform_weights,
)
from .errors import (
    DataError,
    DegenerateAlignment,
    InvalidInput,
    InvalidWindow,
    NumericalError,
)
from .filters import derive_run_seeds
from .groundtruth import ErrorSeries, backdifference_velocity, horn_align
from .statmath import NeesSeries, build_density, l2_divergence
from .traceio import (
    TraceFile,
    load_config,
    read_model,
    read_trace,
    read_trajectory,
    trace_from_estimate,
    write_curve,
    write_model,
    write_overlay,
    write_report,
    write_trace,
    write_transform,
)

RESAMPLE_GROUPS = 50
RESAMPLE_GROUP_SIZE = 200


# ---------------------------------------------------------------------------
# evaluation pipeline (also the library entry point used by tests and demos)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationResult:
    """Everything the evaluate command reports for a set of traces."""

    dof: int
    num_samples: int
    gt_mode: str
    window: Optional[int]
    divergence: float
    divergence_mean: float
    divergence_std: float
    sigma_counts: np.ndarray      # (n, 3) percentages
    density: statmath.EmpiricalDensity
    nees_by_trace: list
    k_by_trace: list
    whitened: np.ndarray
    per_trace_divergence: list


def _parse_gt(spec: str):
    if spec == "none" or spec == "mc":
        return spec, None
    if spec.startswith("ergodic:"):
        try:
            window = int(spec.split(":", 1)[1])
        except ValueError:
            raise InvalidInput(f"bad ergodic window in {spec!r}") from None
        return "ergodic", window
    raise InvalidInput(f"unknown ground-truth mode {spec!r}")


def evaluate_traces(
    traces,
    gt_mode: str = "none",
    window: Optional[int] = None,
    dof: Optional[int] = None,
    bins: Optional[int] = None,
    groups: int = RESAMPLE_GROUPS,
    group_size: int = RESAMPLE_GROUP_SIZE,
    resample_seed: int = 0,
) -> EvaluationResult:
    """NEES statistics, sigma-interval counts, and the divergence test.

    gt_mode selects the covariance the errors are whitened with: "none" uses
    each trace's own estimated covariance, "ergodic" a sliding-window sample
    covariance per trace (requires `window`), and "mc" the across-trace
    sample covariance (traces are treated as Monte-Carlo runs of one
    configuration).  NEES values from all traces are pooled; the mean/std
    come from seeded resampled groups drawn without replacement.
    """
    traces = list(traces)
    if not traces:
        raise InvalidInput("no traces to evaluate")
    n = traces[0].n
    dof = dof if dof is not None else n

    if gt_mode == "mc":
        shared_gt = groundtruth.mc_ground_truth([tf.errors() for tf in traces])

    nees_by_trace, k_by_trace, nu_parts, div_parts = [], [], [], []
    for tf in traces:
        errors = tf.errors()
        if gt_mode == "none":
            covs, mask = tf.p_hat, np.ones(tf.steps, dtype=bool)
        elif gt_mode == "ergodic":
            if window is None:
                raise InvalidWindow("ergodic mode requires a window size")
            gt = groundtruth.ergodic_ground_truth(errors, window)
            covs, mask = gt.packed[gt.mask], gt.mask
        elif gt_mode == "mc":
            covs, mask = shared_gt.packed, np.ones(tf.steps, dtype=bool)
        else:
            raise InvalidInput(f"unknown ground-truth mode {gt_mode!r}")
        e = errors[mask]
        series = statmath.nees_series(e, covs, dof=dof)
        nees_by_trace.append(series.values)
        k_by_trace.append(tf.k[mask])
        nu_parts.append(statmath.sigma_coordinates_series(e, covs, regularize=True))
        div_parts.append(series.values)

    pooled = np.concatenate(div_parts)
    whitened = np.vstack(nu_parts)
    density = build_density(NeesSeries(values=pooled, dof=dof), bins=bins)
    divergence = l2_divergence(density, dof)
    counts = statmath.count_sigma_intervals(whitened)

    rng = np.random.default_rng(resample_seed)
    size = min(group_size, len(pooled))
    group_divs = []
    for _ in range(groups):
        idx = rng.choice(len(pooled), size=size, replace=False)
        d = build_density(NeesSeries(values=pooled[idx], dof=dof))
        group_divs.append(l2_divergence(d, dof))
    group_divs = np.asarray(group_divs)

    per_trace = []
    for vals in nees_by_trace:
        d = build_density(NeesSeries(values=vals, dof=dof), bins=bins)
        per_trace.append(l2_divergence(d, dof))

    return EvaluationResult(
        dof=dof,
        num_samples=len(pooled),
        gt_mode=gt_mode,
        window=window,
        divergence=divergence,
        divergence_mean=float(np.mean(group_divs)),
        divergence_std=float(np.std(group_divs, ddof=1)) if groups > 1 else 0.0,
        sigma_counts=counts.per_dim,
        density=density,
        nees_by_trace=nees_by_trace,
        k_by_trace=k_by_trace,
        whitened=whitened,
        per_trace_divergence=per_trace,
    )


def _load_trace_paths(paths) -> list:
    """Expand files and directories into a sorted list of trace files."""
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found = sorted(p.glob("*.csv")) + sorted(p.glob("*.jsonl"))
            if not found:
                raise InvalidInput(f"no trace files in directory {p}")
            out.extend(found)
        elif p.exists():
            out.append(p)
        else:
            raise InvalidInput(f"no such trace file: {p}")
    return out


def build_training_set(
    sources,
    gt_mode: str,
    window: Optional[int] = None,
) -> TrainingSet:
    """Assemble (estimated, target) covariance pairs from trace sources.

    With gt_mode "mc", each source is a directory of Monte-Carlo runs of one
    sequence: targets come from the across-run sample covariance and the
    estimated covariances/states from the first run.  With "ergodic", each
    trace file contributes its own sliding-window targets on the valid mask.
    """
    p_hat, p_tgt, x_hat, seq_ids, steps_list = [], [], [], [], []
    if gt_mode == "mc":
        for seq_id, src in enumerate(sources):
            src = Path(src)
            if not src.is_dir():
                raise InvalidInput("mc ground truth expects directories of runs")
            traces = [read_trace(p) for p in _load_trace_paths([src])]
            if len(traces) < 2:
                raise InvalidInput(f"need >= 2 runs in {src} for mc ground truth")
            gt = groundtruth.mc_ground_truth([tf.errors() for tf in traces])
            ref = traces[0]
            p_hat.append(ref.p_hat)
            p_tgt.append(gt.packed)
            x_hat.append(ref.x_hat)
            seq_ids.append(np.full(ref.steps, seq_id))
            steps_list.append(ref.k)
    elif gt_mode == "ergodic":
        if window is None:
            raise InvalidWindow("ergodic mode requires a window size")
        for seq_id, path in enumerate(_load_trace_paths(sources)):
            tf = read_trace(path)
            gt = groundtruth.ergodic_ground_truth(tf.errors(), window)
            p_hat.append(tf.p_hat[gt.mask])
            p_tgt.append(gt.packed[gt.mask])
            x_hat.append(tf.x_hat[gt.mask])
            seq_ids.append(np.full(gt.valid_count, seq_id))
            steps_list.append(tf.k[gt.mask])
    else:
        raise InvalidInput("fit requires --gt mc or --gt ergodic:K")
    return TrainingSet.from_arrays(
        np.vstack(p_hat),
        np.vstack(p_tgt),
        x_hat=np.vstack(x_hat),
        seq_id=np.concatenate(seq_ids),
        timestep=np.concatenate(steps_list),
        check_targets=False,  # sample covariances are PSD by construction
    )


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    try:
        system = cfg["system"]["name"]
    except KeyError:
        raise InvalidInput("config must set [system] name") from None
    sim = cfg.get("sim", {})
    seed = args.seed if args.seed is not None else int(sim.get("seed", 0))
    runs = args.runs if args.runs is not None else int(sim.get("runs", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema": "covcal-manifest",
        "version": 1,
        "system": system,
        "seed": seed,
        "runs": runs,
    }

    if system == "spring-mass":
        steps = int(sim.get("steps", 5000))
        traces = systems.spring_mass_runs(
            seed=seed, runs=runs, steps=steps,
            process_std=float(cfg.get("system", {}).get("process_std", systems.SPRING_PROCESS_STD)),
            meas_std=float(cfg.get("system", {}).get("meas_std", systems.SPRING_MEAS_STD)),
        )
        files = []
        for i, est in enumerate(traces):
            name = f"run_{i:03d}.csv"
            write_trace(out / name, trace_from_estimate(est))
            files.append(name)
        manifest["steps"] = steps
        manifest["run_seeds"] = derive_run_seeds(seed, runs)
        manifest["files"] = files
    elif system == "dubins":
        seq_cfg = cfg.get("sequences", {})
        count = int(seq_cfg.get("count", 12))
        seq_seed = int(seq_cfg.get("seed", seed))
        steps = int(seq_cfg.get("steps", 600))
        specs = systems.generate_sequences(seed=seq_seed, count=count, steps=steps)
        truth_noise, filter_noise = systems.dubins_noise_from_config(
            cfg.get("system", {})
        )
        manifest["sequences"] = []
        for i, spec in enumerate(specs):
            seq_dir = out / f"seq_{i:02d}"
            seq_dir.mkdir(exist_ok=True)
            traces = systems.dubins_runs(
                spec, runs=runs, truth_noise=truth_noise, filter_noise=filter_noise
            )
            files = []
            for j, est in enumerate(traces):
                name = f"run_{j:03d}.csv"
                write_trace(seq_dir / name, trace_from_estimate(est))
                files.append(f"seq_{i:02d}/{name}")
            manifest["sequences"].append({
                "index": i,
                "amplitude": spec.amplitude,
                "omega_const": spec.omega_const,
                "freq": spec.freq,
                "steps": spec.steps,
                "seed": spec.seed,
                "test": i == count - 1,
                "files": files,
            })
    else:
        raise InvalidInput(f"unknown system {system!r}")

    write_report(out / "manifest.json", manifest)
    return 0


def cmd_evaluate(args) -> int:
    traces = [read_trace(p) for p in _load_trace_paths(args.traces)]
    mode, window = _parse_gt(args.gt)
    result = evaluate_traces(
        traces,
        gt_mode=mode,
        window=window,
        dof=args.dof,
        bins=args.bins,
        groups=args.groups,
        group_size=args.group_size,
        resample_seed=args.seed if args.seed is not None else 0,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "schema": "covcal-report",
        "version": 1,
        "dof": result.dof,
        "num_samples": result.num_samples,
        "gt_mode": result.gt_mode,
        "window": result.window,
        "bins": len(result.density.bin_heights),
        "divergence": result.divergence,
        "divergence_mean": result.divergence_mean,
        "divergence_std": result.divergence_std,
        "resample_groups": args.groups,
        "resample_group_size": args.group_size,
        "resample_seed": args.seed if args.seed is not None else 0,
        "sigma_counts": [[float(v) for v in row] for row in result.sigma_counts],
    }
    if args.per_sequence:
        report["per_trace_divergence"] = result.per_trace_divergence
    write_report(out / "report.json", report)
    write_overlay(out / "overlay.csv", result.density, result.dof)

    lines = ["# trace,k,nees"]
    for ti, (ks, vals) in enumerate(zip(result.k_by_trace, result.nees_by_trace)):
        for k, v in zip(ks, vals):
            lines.append(f"{ti},{int(k)},{traceio._fmt(v)}")
    (out / "nees.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["# trace,k," + ",".join(f"nu_{i}" for i in range(result.whitened.shape[1]))]
    row = 0
    for ti, ks in enumerate(result.k_by_trace):
        for k in ks:
            nu = ",".join(traceio._fmt(v) for v in result.whitened[row])
            lines.append(f"{ti},{int(k)},{nu}")
            row += 1
    (out / "whitened.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    print(f"divergence {result.divergence:.4f} "
          f"({result.divergence_mean:.4f} +/- {result.divergence_std:.4f} resampled)")
    return 0


def cmd_fit(args) -> int:
    mode, window = _parse_gt(args.gt)
    ts = build_training_set(args.sources, mode, window)
    weights = None
    if args.weights is not None:
        weights = LOSS_WEIGHT_PRESETS[args.weights](ts.dim)
    seed = args.seed if args.seed is not None else 0

    if args.method == "scalar":
        model = fit_scalar(ts, weights=weights)
        curve = np.array([0.0])
    elif args.method == "matrix":
        model, curve = fit_matrix(ts, weights=weights)
    elif args.method in ("mlp", "mlp-state"):
        use_state = args.method == "mlp-state"
        if args.preset is not None:
            preset = MLP_PRESETS[args.preset]
            hidden, l2, epochs = preset.hidden, preset.l2, preset.epochs
            use_state = preset.use_state
        else:
            if not args.hidden:
                raise InvalidInput("mlp fit needs --preset or --hidden")
            hidden = tuple(int(w) for w in args.hidden.split(","))
            l2 = args.l2
            epochs = args.epochs
        model, curve = train_mlp(
            ts,
            hidden=hidden,
            weights=weights if weights is not None else uniform_weights(ts.dim),
            l2=l2,
            epochs=epochs,
            seed=seed,
            use_state=use_state,
        )
    else:
        raise InvalidInput(f"unknown method {args.method!r}")

    write_model(args.out, model)
    write_curve(str(args.out) + ".curve.csv", curve)
    return 0


def cmd_apply(args) -> int:
    model = read_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in _load_trace_paths(args.traces):
        tf = read_trace(path)
        if isinstance(model, calmaps.MlpMap) and model.use_state:
            adjusted = model.apply_packed(tf.p_hat, tf.x_hat)
        else:
            adjusted = model.apply_packed(tf.p_hat)
        if adjusted.shape != tf.p_hat.shape:
            raise InvalidInput("model dimension does not match trace")
        write_trace(out / Path(path).name, tf.replace_p_hat(adjusted))
    return 0


def _position_slice(tf: TraceFile):
    for b, sl in tf.block_slices():
        if b.name in ("translation", "position"):
            return sl
    if len(tf.blocks) == 1 and tf.n >= 3:
        return slice(0, 3)
    raise InvalidInput("trace has no translation/position block")


def cmd_align(args) -> int:
    tf = read_trace(args.est)
    traj = read_trajectory(args.gt)
    inside = (tf.t >= traj.t[0]) & (tf.t <= traj.t[-1])
    if np.sum(inside) < 3:
        raise DegenerateAlignment("fewer than 3 overlapping timestamps")
    idx = np.nonzero(inside)[0]
    gt = traceio.interpolate_trajectory(traj, tf.t[idx])

    pos_sl = _position_slice(tf)
    transform = horn_align(gt.position, tf.x_hat[idx, pos_sl])
    aligned_pos = transform.apply(gt.position)

    x_true = tf.x_true[idx].copy()
    x_true[:, pos_sl] = aligned_pos
    if gt.rotation is not None:
        from scipy.spatial.transform import Rotation

        for b, sl in tf.block_slices():
            if b.diff == "rotation-vector":
                r_align = Rotation.from_matrix(transform.rotation)
                x_true[:, sl] = (r_align * Rotation.from_rotvec(gt.rotation)).as_rotvec()
                break
    if args.backdiff_velocity:
        vel_sl = None
        for b, sl in tf.block_slices():
            if b.name == "velocity":
                vel_sl = sl
                break
        if vel_sl is None:
            raise InvalidInput("trace has no velocity block to fill")
        dt = float(np.mean(np.diff(tf.t[idx]))) if len(idx) > 1 else tf.dt
        x_true[:, vel_sl] = backdifference_velocity(aligned_pos, dt)

    aligned = TraceFile(
        n=tf.n, m=tf.m, dt=tf.dt, blocks=tf.blocks,
        k=tf.k[idx], t=tf.t[idx], x_true=x_true,
        x_hat=tf.x_hat[idx], p_hat=tf.p_hat[idx],
    )
    write_trace(args.out, aligned)
    write_transform(str(args.out) + ".transform.json", transform)
    return 0


def cmd_window_search(args) -> int:
    traces = [read_trace(p) for p in _load_trace_paths(args.traces)]
    try:
        start, stop, step = (int(v) for v in args.range.split(":"))
    except ValueError:
        raise InvalidInput(f"bad --range {args.range!r}, expected start:stop:step") from None
    windows = list(range(start, stop + 1, step))
    dof = args.dof if args.dof is not None else traces[0].n
    best, table = groundtruth.window_search(
        [ErrorSeries.from_values(tf.errors()) for tf in traces],
        windows, dof=dof, bins=args.bins,
        threads=args.threads,
    )
    lines = ["# window,divergence"]
    for k, d in table:
        lines.append(f"{int(k)},{traceio._fmt(d)}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best window {best}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for item in args.rows:
        if "=" not in item:
            raise InvalidInput(f"report rows must be NAME=REPORT.json, got {item!r}")
        name, path = item.split("=", 1)
        rows.append((name, traceio.read_report(path)))
    if len(rows) < 2:
        raise InvalidInput("need at least baseline and ground-truth rows")
    d_unadj = rows[0][1]["divergence"]
    d_gt = rows[1][1]["divergence"]

    def fmt_sigma(report, col):
        return "/".join(f"{row[col]:.1f}" for row in report["sigma_counts"])

    lines = ["name,pct_dec,div_mean,div_std,sigma1,sigma2,sigma3"]
    printed = []
    for name, rep in rows:
        pct = calmaps.percent_decrease(d_unadj, rep["divergence"], d_gt) + 0.0
        lines.append(",".join([
            name, f"{pct:.1f}",
            traceio._fmt(rep["divergence_mean"]), traceio._fmt(rep["divergence_std"]),
            fmt_sigma(rep, 0), fmt_sigma(rep, 1), fmt_sigma(rep, 2),
        ]))
        printed.append((name, pct, rep["divergence_mean"], rep["divergence_std"]))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, pct, mean, std in printed:
        print(f"{name:>20s}  {pct:7.1f}%  {mean:.4f} +/- {std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covcal",
        description="Kalman filter consistency evaluation and covariance calibration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("simulate", parents=[common], help="run a benchmark system")
    p.add_argument("config")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="NEES/divergence report")
    p.add_argument("traces", nargs="+")
    p.add_argument("--gt", default="none", help="none | mc | ergodic:K")
    p.add_argument("--dof", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--groups", type=int, default=RESAMPLE_GROUPS)
    p.add_argument("--group-size", type=int, default=RESAMPLE_GROUP_SIZE)
    p.add_argument("--per-sequence", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit", parents=[common], help="fit a calibration map")
    p.add_argument("sources", nargs="+")
    p.add_argument("--method", required=True,
                   choices=["scalar", "matrix", "mlp", "mlp-state"])
    p.add_argument("--gt", required=True, help="mc | ergodic:K")
    p.add_argument("--preset", choices=sorted(MLP_PRESETS), default=None)
    p.add_argument("--hidden", default=None, help="comma-separated widths")
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--weights", choices=sorted(LOSS_WEIGHT_PRESETS), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("apply", parents=[common], help="apply a map to traces")
    p.add_argument("model")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("align", parents=[common],
                       help="align external ground truth to a trace")
    p.add_argument("--gt", required=True, help="trajectory file")
    p.add_argument("--est", required=True, help="estimate trace file")
    p.add_argument("--backdiff-velocity", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("window-search", parents=[common],
                       help="scan ergodic window sizes")
    p.add_argument("traces", nargs="+")
    p.add_argument("--range", required=True, help="start:stop:step (odd sizes)")
    p.add_argument("--dof", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_window_search)

    p = sub.add_parser("report", parents=[common],
                       help="combine evaluate outputs into a table")
    p.add_argument("rows", nargs="+",
                   help="NAME=report.json; first is baseline, second ground truth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
