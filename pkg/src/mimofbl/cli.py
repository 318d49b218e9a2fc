"""Command-line entry point: run one configured experiment to files.

    simulate <config.json> [--scenario S] [--threads N] [--out DIR]

A run writes records.jsonl (one result record per line), one CSV per
figure, a PNG rendering per CSV, and run_manifest.json echoing the
resolved configuration.  The CSVs carry no timestamps, so a repeated
run with the same config and seed reproduces them byte for byte.
Exit codes: 0 success, 2 configuration problem, 3 numeric failure.

The orchestration here is single-threaded; --threads is handed to the
scenario loops, which parallelize over placements or grid points.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import replace as _dc_replace

import numpy as np

from . import harness, kernel, plots
from .config import SCENARIOS, ConfigError, ExperimentSpec, parse_config
from .records import (
    ResultRecord,
    _csv,
    emit_plot_data,
    write_manifest,
    write_records,
)
from .rng import complex_normal, substream


def _clip01(x: float) -> float:
    return min(max(float(x), 0.0), 1.0)


def _ci_from_se(value: float, se: float, count: int):
    """CLT interval over independent repetitions; degenerate for one."""
    if count < 2:
        return _clip01(value), _clip01(value)
    return _clip01(value - 1.96 * se), _clip01(value + 1.96 * se)


# ---------------------------------------------------------------------------
# scenario runners: spec -> (records, {csv name: text}, {png name: draw fn})
# ---------------------------------------------------------------------------


def _run_single_ue(spec: ExperimentSpec, threads: int):
    curve = harness.run_single_ue(
        antennas=tuple(spec["antenna_grid"]),
        power_mode=spec["power_mode"],
        blocklength=spec["n"],
        rate_bits=spec["b"] / spec["n"],
        num_fading=spec["num_fading"],
        master_seed=spec.seed,
        mc_samples_per_draw=spec["mc_samples_per_draw"])
    cfg_hash = spec.config_hash()
    records = []
    for i, m in enumerate(curve.antennas):
        axes = {"m": int(m)}

        def rec(method, value, lo=None, hi=None):
            return ResultRecord(
                scenario=spec.scenario, config_hash=cfg_hash, axes=axes,
                method=method, value=_clip01(value), ci_low=lo, ci_high=hi)

        records.append(rec("rcus-mc", curve.eps_mc[i],
                           _clip01(curve.mc_ci_low[i]),
                           _clip01(curve.mc_ci_high[i])))
        records.append(rec("saddlepoint", curve.eps_saddle[i]))
        records.append(rec("normal", curve.eps_normal[i]))
        records.append(rec("outage", curve.eps_outage[i],
                           _clip01(curve.outage_ci_low[i]),
                           _clip01(curve.outage_ci_high[i])))
        if curve.eps_normal_limit is not None:
            records.append(rec("normal-asymptotic", curve.eps_normal_limit))
    csvs = {"single_ue.csv": emit_plot_data(records, "single-ue")}
    pngs = {"single_ue.png": lambda p: plots.plot_single_ue(curve, p)}
    return records, csvs, pngs


def _run_two_ue_angle(spec: ExperimentSpec, threads: int):
    cfg = spec.network_config()
    points = spec["angle_points"]
    grid = np.linspace(spec["angle_min_deg"], spec["angle_max_deg"], points)
    sweep = harness.run_two_ue_angle_sweep(
        config=cfg,
        fixed_angle_deg=spec["fixed_angle_deg"],
        angle_grid_deg=grid,
        shared_pilots=spec["shared_pilots"],
        num_fading=spec["num_fading"],
        num_hardening=spec["num_hardening"],
        ue_distance=spec["ue_distance_m"],
        master_seed=spec.seed,
        workers=threads)
    cfg_hash = spec.config_hash()
    records = []
    for (direction, comb), eps in sorted(sweep.eps.items()):
        ses = sweep.eps_se[(direction, comb)]
        for i, angle in enumerate(grid):
            # user 0 sits at the fixed angle; it is the tracked link
            value = _clip01(eps[i, 0])
            lo, hi = _ci_from_se(value, ses[i, 0], spec["num_fading"])
            records.append(ResultRecord(
                scenario=spec.scenario, config_hash=cfg_hash,
                axes={"phi2_deg": float(angle), "m": cfg.num_antennas,
                      "direction": direction, "combiner": comb},
                method="fading-average", value=value, ci_low=lo, ci_high=hi))
    csvs = {"two_ue_angle.csv": emit_plot_data(records, "two-ue-angle")}
    pngs = {"two_ue_angle.png": lambda p: plots.plot_two_ue_angle(sweep, p)}
    return records, csvs, pngs


def _run_asymptotic(spec: ExperimentSpec, threads: int):
    base = spec.network_config()
    result = harness.run_asymptotic_sweep(
        config=base,
        antennas=tuple(spec["antenna_grid"]),
        shared_pilots=spec["shared_pilots"],
        angles_deg=(spec["phi1_deg"], spec["phi2_deg"]),
        ue_distance=spec["ue_distance_m"],
        num_fading=spec["num_fading"],
        num_hardening=spec["num_hardening"],
        master_seed=spec.seed,
        workers=threads)
    cfg_hash = spec.config_hash()
    records = []
    for (direction, comb), eps in sorted(result.eps.items()):
        ses = result.eps_se[(direction, comb)]
        for i, m in enumerate(result.antennas):
            value = _clip01(eps[i])
            lo, hi = _ci_from_se(value, ses[i], spec["num_fading"])
            records.append(ResultRecord(
                scenario=spec.scenario, config_hash=cfg_hash,
                axes={"m": int(m), "direction": direction, "combiner": comb},
                method="fading-average", value=value, ci_low=lo, ci_high=hi))
    for i, m in enumerate(result.antennas):
        records.append(ResultRecord(
            scenario=spec.scenario, config_hash=cfg_hash,
            axes={"m": int(m)}, method="asymptotic-prediction",
            value=_clip01(result.limits.prediction_eps[i])))
    csvs = {"asymptotic.csv": emit_plot_data(records, "asymptotic")}
    pngs = {"asymptotic.png": lambda p: plots.plot_asymptotic(result, p)}
    return records, csvs, pngs


def _run_availability(spec: ExperimentSpec, threads: int):
    base = spec.network_config()
    result = harness.run_network_availability(
        config=base,
        eps_target=spec["eps_target"],
        num_placements=spec["num_placements"],
        num_fading=spec["num_fading"],
        num_hardening=spec["num_hardening"],
        reuse_factors=tuple(spec["reuse_factors"]),
        master_seed=spec.seed,
        workers=threads)
    cfg_hash = spec.config_hash()
    records = []
    for (npil, comb, direction), link_eps in sorted(result.link_eps.items()):
        # per-placement availability fractions carry the outer CI
        frac = np.mean(link_eps <= result.eps_target, axis=(1, 2))
        value = _clip01(frac.mean())
        se = (float(frac.std(ddof=1)) / math.sqrt(frac.size)
              if frac.size > 1 else 0.0)
        lo, hi = _ci_from_se(value, se, frac.size)
        records.append(ResultRecord(
            scenario=spec.scenario, config_hash=cfg_hash,
            axes={"pilot_length": int(npil), "combiner": comb,
                  "direction": direction},
            method="availability", value=value, ci_low=lo, ci_high=hi))
    csvs = {"availability.csv": emit_plot_data(records, "availability")}
    pngs = {"availability.png": lambda p: plots.plot_availability(result, p)}
    return records, csvs, pngs


def _random_validation_channel(rng, n: int):
    """One random conditional channel with a usable positive rate."""
    for _ in range(100):
        gain = complex_normal(rng, ())
        frac = rng.uniform(0.0, 0.5)
        phase = np.exp(2j * np.pi * rng.uniform())
        gain_est = gain - frac * abs(gain) * phase
        noise_var = 10.0 ** rng.uniform(-1.5, 0.5)
        power = 10.0 ** rng.uniform(-0.5, 1.0)
        s = float(1.0 / (noise_var + power * abs(gain - gain_est) ** 2)
                  * 10.0 ** rng.uniform(-0.3, 0.3))
        ctx = kernel.saddle_context(s, gain, gain_est, noise_var, power)
        gmi = -kernel.cgf_d1(ctx, 0.0)
        if gmi <= 0.0:
            continue
        rate = (1.0 - rng.uniform(0.1, 0.3)) * gmi
        return ctx, rate
    raise RuntimeError("no random channel with positive rate in 100 tries")


def _run_kernel_validate(spec: ExperimentSpec, threads: int):
    n = spec["n"]
    num_channels = spec["num_channels"]
    mc_samples = spec["mc_samples"]
    cfg_hash = spec.config_hash()

    cgf_rows = []
    bound_rows = []
    scatter = []
    records = []
    for i in range(num_channels):
        rng = substream(spec.seed, "kernel-validate", i)
        ctx, rate = _random_validation_channel(rng, n)

        # finite-difference check of the transform derivatives, at five
        # interior points kept clear of the domain edges; the domain can
        # stretch to huge sentinels, so cap the window at a few units
        lo = max(ctx.zeta_lo * 0.9, -2.0)
        hi = min(ctx.zeta_hi * 0.9, 2.0)
        span = hi - lo
        step = 1e-5 * span
        zetas = np.sort(rng.uniform(lo + 0.05 * span, hi - 0.05 * span, 5))
        for zeta in zetas:
            k0 = kernel.cgf(ctx, zeta)
            k1 = kernel.cgf_d1(ctx, zeta)
            k2 = kernel.cgf_d2(ctx, zeta)
            up = kernel.cgf(ctx, zeta + step)
            dn = kernel.cgf(ctx, zeta - step)
            fd1 = (up - dn) / (2.0 * step)
            fd2 = (up - 2.0 * k0 + dn) / step ** 2
            cgf_rows.append([
                i, zeta, k0, k1, fd1,
                abs(fd1 - k1) / max(abs(k1), 1e-300),
                k2, fd2, abs(fd2 - k2) / max(abs(k2), 1e-300)])

        sp = kernel.saddlepoint_eps(ctx, n, rate)
        mc_seed = int(substream(spec.seed, "kernel-validate-mc",
                                i).integers(2 ** 63))
        mc = kernel.rcus_mc_eps(ctx.gain, ctx.gain_est, ctx.noise_var,
                                ctx.power, ctx.s, n, rate,
                                num_samples=mc_samples, seed=mc_seed)
        inside = int(mc.ci_low <= sp.value <= mc.ci_high)
        bound_rows.append([i, ctx.s, n, rate, sp.value, mc.value,
                           mc.ci_low, mc.ci_high, inside])
        scatter.append((mc.value, mc.ci_low, mc.ci_high, sp.value))

        axes = {"channel": i}
        records.append(ResultRecord(
            scenario=spec.scenario, config_hash=cfg_hash, axes=axes,
            method="saddlepoint", value=_clip01(sp.value), s_used=ctx.s,
            zeta_used=sp.zeta_used))
        records.append(ResultRecord(
            scenario=spec.scenario, config_hash=cfg_hash, axes=axes,
            method="rcus-mc", value=_clip01(mc.value),
            ci_low=_clip01(mc.ci_low), ci_high=_clip01(mc.ci_high),
            s_used=ctx.s))

    csvs = {
        "cgf_check.csv": _csv(
            ["channel", "zeta", "kappa", "kappa_d1", "fd_d1", "rel_err_d1",
             "kappa_d2", "fd_d2", "rel_err_d2"], cgf_rows),
        "bound_check.csv": _csv(
            ["channel", "s", "n", "rate", "eps_saddle", "eps_mc",
             "mc_ci_low", "mc_ci_high", "saddle_inside_ci"], bound_rows),
    }
    pngs = {"bound_check.png":
            lambda p: plots.plot_kernel_validate(scatter, p)}
    return records, csvs, pngs


_RUNNERS = {
    "single-ue": _run_single_ue,
    "two-ue-angle": _run_two_ue_angle,
    "asymptotic": _run_asymptotic,
    "availability": _run_availability,
    "kernel-validate": _run_kernel_validate,
}


def run_experiment(spec: ExperimentSpec, out_dir: str, threads: int = 1,
                   make_plots: bool = True) -> list[str]:
    """Run one experiment and write its outputs; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    start = time.perf_counter()
    records, csvs, pngs = _RUNNERS[spec.scenario](spec, threads)
    wall = time.perf_counter() - start
    records = [_dc_replace(rec, wall_time_s=round(wall, 3))
               for rec in records]

    outputs = []
    rec_path = os.path.join(out_dir, "records.jsonl")
    write_records(records, rec_path)
    outputs.append(rec_path)
    for name, text in sorted(csvs.items()):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        outputs.append(path)
    if make_plots:
        for name, draw in sorted(pngs.items()):
            path = os.path.join(out_dir, name)
            draw(path)
            outputs.append(path)

    manifest_path = os.path.join(out_dir, "run_manifest.json")
    write_manifest(manifest_path, spec, wall,
                   [os.path.basename(p) for p in outputs],
                   num_records=len(records))
    outputs.append(manifest_path)
    return outputs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Run one experiment described by a JSON config file.",
        epilog="Correlation matrices are cached under $MIMOFBL_CACHE_DIR "
               "when that variable is set.")
    parser.add_argument("config", help="path to the JSON config file")
    parser.add_argument("--scenario", choices=SCENARIOS, default=None,
                        help="scenario to run when the config omits the "
                             "'scenario' key (must agree when both given)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for the scenario loops")
    parser.add_argument("--out", default=None,
                        help="output directory (default: the config's "
                             "out_dir key)")
    parser.add_argument("--no-plots", action="store_true",
                        help="skip the PNG renderings")
    args = parser.parse_args(argv)

    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        spec = parse_config(args.config, scenario_override=args.scenario)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = args.out if args.out is not None else spec.out_dir
    try:
        outputs = run_experiment(spec, out_dir, threads=args.threads,
                                 make_plots=not args.no_plots)
    except Exception as exc:  # surfaced with a stable exit code
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
