"""Figure rendering for the report path.

Each function draws one scenario's headline figure next to its CSV so a
run directory is self-describing.  Rendering is deliberately plain: log
error axes, one line per series, no styling beyond labels.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_FLOOR = 1e-12  # log-axis floor for exact zeros


def _clip(values):
    return np.maximum(np.asarray(values, dtype=np.float64), _FLOOR)


def plot_single_ue(curve, path: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    m = np.asarray(curve.antennas)
    ax.loglog(m, _clip(curve.eps_mc), "o-", label="random-coding MC")
    ax.loglog(m, _clip(curve.eps_saddle), "s--", label="saddlepoint")
    ax.loglog(m, _clip(curve.eps_normal), "^:", label="normal approx")
    ax.loglog(m, _clip(curve.eps_outage), "v-.", label="outage")
    if curve.eps_normal_limit is not None:
        ax.axhline(max(curve.eps_normal_limit, _FLOOR), color="gray",
                   lw=0.8, label="normal, no fading")
    ax.set_xlabel("antennas")
    ax.set_ylabel("average error probability")
    ax.set_title(f"single user, {curve.power_mode} power")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_two_ue_angle(sweep, path: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    styles = {("ul", "mr"): "C0-", ("dl", "mr"): "C0--",
              ("ul", "mmse"): "C1-", ("dl", "mmse"): "C1--"}
    for key, style in styles.items():
        if key in sweep.eps:
            ax.semilogy(sweep.angle_grid_deg, _clip(sweep.eps[key][:, 0]),
                        style, label=f"{key[1].upper()} {key[0]}")
    ax.axvline(sweep.fixed_angle_deg, color="gray", lw=0.8)
    ax.set_xlabel("interferer angle (deg)")
    ax.set_ylabel("error probability, fixed user")
    ax.set_title(f"two users, {sweep.antennas} antennas")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_asymptotic(result, path: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    m = np.asarray(result.antennas)
    styles = {("ul", "mr"): "C0o-", ("dl", "mr"): "C0s--",
              ("ul", "mmse"): "C1o-", ("dl", "mmse"): "C1s--"}
    for key, style in styles.items():
        if key in result.eps:
            ax.loglog(m, _clip(result.eps[key]), style,
                      label=f"{key[1].upper()} {key[0]}")
    ax.loglog(m, _clip(result.limits.prediction_eps), "k:",
              label="limit prediction")
    ax.set_xlabel("antennas")
    ax.set_ylabel("error probability, tracked user")
    ax.set_title("large-array behaviour"
                 + (", shared pilot" if result.shared_pilots else ""))
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_availability(result, path: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    table = result.eta_table()
    pilot_lengths = sorted({k[0] for k in table})
    series = [("mmse", "ul", "C1o-", "MMSE ul"),
              ("mmse", "dl", "C1s--", "MMSE dl"),
              ("mmse", "dl-perfect", "C1^:", "MMSE dl, perfect CSI"),
              ("mr", "ul", "C0o-", "MR ul"),
              ("mr", "dl", "C0s--", "MR dl")]
    for comb, direction, style, label in series:
        pts = [(npil, table[(npil, comb, direction)])
               for npil in pilot_lengths if (npil, comb, direction) in table]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], style,
                    label=label)
    ax.set_xlabel("pilot symbols")
    ax.set_ylabel(f"availability at eps = {result.eps_target:g}")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_kernel_validate(rows, path: str):
    """rows: (eps_mc, ci_low, ci_high, eps_saddle) tuples."""
    fig, ax = plt.subplots(figsize=(4.8, 4.4))
    mc = _clip([r[0] for r in rows])
    sp = _clip([r[3] for r in rows])
    lo = _clip([r[1] for r in rows])
    hi = _clip([r[2] for r in rows])
    ax.errorbar(mc, sp, xerr=[mc - lo, hi - mc], fmt="o", ms=4, capsize=2)
    span = [min(mc.min(), sp.min()) * 0.5, max(mc.max(), sp.max()) * 2.0]
    ax.plot(span, span, "k:", lw=0.8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("Monte-Carlo bound")
    ax.set_ylabel("saddlepoint bound")
    ax.set_title("bound agreement per random channel")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
