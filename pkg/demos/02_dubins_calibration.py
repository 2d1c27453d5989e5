"""A miscalibrated EKF and the maps that repair it: Dubins car benchmark.

A Dubins car with state [x, y, v, theta] is localized from range/bearing
measurements to four beacons.  The filter's process-noise model understates
the truth, so its covariances are systematically overconfident while the
state error stays at the centimeter level.  Eleven training sequences (and
one held-out test sequence) of sinusoidal-acceleration inputs provide
training pairs (estimated covariance, Monte-Carlo sample covariance), and
the four calibration hypotheses are fitted and compared:

    1. global scalar      P = s * Phat            (closed form)
    2. global matrix      P = A Phat A^T          (gradient descent)
    3. network            P = QQ^T, Q = phi(Phat)
    4. network w/ state   P = QQ^T, Q = phi(xhat, Phat)

The output table mirrors the benchmark report layout: percent decrease of
divergence (relative to the Monte-Carlo ground-truth baseline), resampled
divergence mean +/- std, and per-dimension 1-sigma percentages.

Run (about 4-6 minutes at the defaults):
    python demos/02_dubins_calibration.py [--runs 50] [--quick]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from covcal.calmaps import (
    MLP_PRESETS,
    TrainingSet,
    ekf2d_weights,
    fit_matrix,
    fit_scalar,
    percent_decrease,
    train_mlp,
)
from covcal.cli import evaluate_traces
from covcal.groundtruth import mc_ground_truth
from covcal.systems import dubins_runs, generate_sequences
from covcal.traceio import trace_from_estimate, write_overlay


def build_training_set(specs, runs):
    p_hat, p_tgt, x_hat = [], [], []
    for i, spec in enumerate(specs):
        traces = [trace_from_estimate(e) for e in dubins_runs(spec, runs=runs)]
        gt = mc_ground_truth([t.errors() for t in traces])
        p_hat.append(traces[0].p_hat)
        p_tgt.append(gt.packed)
        x_hat.append(traces[0].x_hat)
        print(f"  sequence {i}: amplitude {spec.amplitude:.2f}, "
              f"omega {spec.omega_const:+.2f}")
    return TrainingSet.from_arrays(
        np.vstack(p_hat), np.vstack(p_tgt), x_hat=np.vstack(x_hat),
        check_targets=False,
    )


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--runs", type=int, default=50)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--quick", action="store_true",
                        help="fewer runs and training epochs")
    parser.add_argument("--out", default="demos/output/dubins")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = 15 if args.quick else args.runs

    specs = generate_sequences(seed=args.seed, count=12, steps=600)
    print(f"simulating 11 training sequences x {runs} runs...")
    t0 = time.time()
    ts = build_training_set(specs[:-1], runs)
    test_traces = [trace_from_estimate(e)
                   for e in dubins_runs(specs[-1], runs=runs)]
    print(f"  ({time.time() - t0:.0f}s)")

    rows = []
    r_un = evaluate_traces(test_traces, gt_mode="none")
    r_gt = evaluate_traces(test_traces, gt_mode="mc")
    rows.append(("unadjusted", r_un))
    rows.append(("mc ground truth", r_gt))
    write_overlay(out / "overlay_unadjusted.csv", r_un.density, 4)
    write_overlay(out / "overlay_ground_truth.csv", r_gt.density, 4)

    def evaluate_map(m, use_state=False):
        adjusted = [
            t.replace_p_hat(m.apply_packed(t.p_hat, t.x_hat if use_state else None))
            for t in test_traces
        ]
        return evaluate_traces(adjusted, gt_mode="none")

    print("fitting scalar...")
    rows.append(("global scalar", evaluate_map(fit_scalar(ts))))

    print("fitting matrix...")
    mm, curve = fit_matrix(ts, max_iter=200)
    print(f"  objective {curve[0]:.3e} -> {curve[-1]:.3e} "
          f"in {len(curve) - 1} steps")
    rows.append(("global matrix", evaluate_map(mm)))

    weights = ekf2d_weights(4)
    for name, preset_name in (("network", "ekf2d-h3"),
                              ("network w/ state", "ekf2d-h4")):
        preset = MLP_PRESETS[preset_name]
        epochs = max(5, preset.epochs // 5) if args.quick else preset.epochs
        print(f"training {name} ({preset_name}: hidden {preset.hidden}, "
              f"l2 {preset.l2}, {epochs} epochs)...")
        t0 = time.time()
        mlp, _ = train_mlp(ts, hidden=preset.hidden, weights=weights,
                           l2=preset.l2, epochs=epochs, seed=args.seed,
                           use_state=preset.use_state)
        print(f"  ({time.time() - t0:.0f}s)")
        result = evaluate_map(mlp, use_state=preset.use_state)
        rows.append((name, result))
        write_overlay(out / f"overlay_{preset_name}.csv", result.density, 4)

    d_un = r_un.divergence_mean
    d_gt = r_gt.divergence_mean
    print(f"\n{'':>18s}  {'% dec':>6s}  {'divergence (resampled)':>24s}  1-sigma %")
    for name, res in rows:
        pct = percent_decrease(d_un, res.divergence_mean, d_gt) + 0.0
        sig = ", ".join(f"{v:.1f}" for v in res.sigma_counts[:, 0])
        print(f"{name:>18s}  {pct:5.1f}%  {res.divergence_mean:.4f} +/- "
              f"{res.divergence_std:.4f}        {sig}")
    print(f"\noverlays written to {out}/")


if __name__ == "__main__":
    main()
