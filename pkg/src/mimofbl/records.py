"""Result persistence: JSON-lines records, per-figure CSV, run manifest.

Every scenario produces a flat list of ResultRecords; the CSV emitters
pivot those records into the column layout each figure expects.  All
delimited output uses 9 significant digits, enough to regenerate any
plot while keeping the files diffable.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, asdict

from .config import ExperimentSpec, canonical_json

_SIG = "{:.9g}"


@dataclass(frozen=True)
class ResultRecord:
    """One persisted estimate: an error probability or an availability.

    axes identifies the point (antenna count, angle, pilot length,
    direction, ...); method names the estimator that produced it.
    """

    scenario: str
    config_hash: str
    axes: dict
    method: str
    value: float
    ci_low: float | None = None
    ci_high: float | None = None
    s_used: float | None = None
    zeta_used: float | None = None
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0) or math.isnan(self.value):
            raise ValueError(
                f"record value must be a probability in [0, 1], got "
                f"{self.value!r} at {self.axes!r}")
        has_ci = (self.ci_low is not None, self.ci_high is not None)
        if has_ci[0] != has_ci[1]:
            raise ValueError("ci_low and ci_high must come together")
        if has_ci[0] and not (self.ci_low - 1e-12 <= self.value
                              <= self.ci_high + 1e-12):
            raise ValueError(
                f"confidence interval [{self.ci_low}, {self.ci_high}] "
                f"does not bracket value {self.value} at {self.axes!r}")
        for key in self.axes:
            if not isinstance(key, str):
                raise ValueError(f"axis names must be strings, got {key!r}")

    def to_json(self) -> str:
        return canonical_json(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "ResultRecord":
        return cls(**json.loads(line))


def write_records(records, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return [ResultRecord.from_json(line) for line in fh
                if line.strip()]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return str(value)
    return _SIG.format(value)


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(cell) for cell in row) for row in rows)
    return "\n".join(lines) + "\n"


def _pivot(records, axis_keys, series_of):
    """Group records by their axis tuple; map each to {series: record}.

    series_of returns the output column for a record, or None to leave
    it out of the figure.
    """
    table = {}
    for rec in records:
        series = series_of(rec)
        if series is None:
            continue
        point = tuple(rec.axes[k] for k in axis_keys)
        cell = table.setdefault(point, {})
        if series in cell:
            raise ValueError(
                f"duplicate records for {dict(zip(axis_keys, point))}, "
                f"series {series}")
        cell[series] = rec
    return table


def _require_full(table, series, axis_keys) -> list:
    gaps = []
    for point in sorted(table):
        missing = [s for s in series if s not in table[point]]
        gaps.extend(
            f"{dict(zip(axis_keys, point))}: missing {s}" for s in missing)
    if gaps:
        raise ValueError("figure data has gaps: " + "; ".join(gaps))
    return sorted(table)


def emit_plot_data(records, figure: str) -> str:
    """CSV for one figure, pivoted from the given records.

    Raises on an empty record set or any axis point that lacks one of
    the figure's series; an incomplete plot is treated as an error, not
    a thinner file.
    """
    records = list(records)
    if not records:
        raise ValueError(f"no records to emit for figure '{figure}'")
    try:
        builder = _FIGURES[figure]
    except KeyError:
        raise ValueError(f"unknown figure '{figure}'; choose from "
                         f"{sorted(_FIGURES)}") from None
    return builder(records)


def _single_ue_csv(records) -> str:
    methods = {"rcus-mc": "eps_rcus_mc", "saddlepoint": "eps_saddle",
               "normal": "eps_normal", "outage": "eps_outage",
               "normal-asymptotic": "eps_normal_asym"}
    table = _pivot(records, ("m",), lambda r: methods.get(r.method))
    core = ["eps_rcus_mc", "eps_saddle", "eps_normal", "eps_outage"]
    points = sorted(table)
    with_asym = all("eps_normal_asym" in table[p] for p in points)
    cols = core + (["eps_normal_asym"] if with_asym else [])
    _require_full(table, cols, ("m",))
    rows = [[p[0]] + [table[p][c].value for c in cols] for p in points]
    return _csv(["M"] + cols, rows)


def _series_dir_comb(rec):
    axes = rec.axes
    if "direction" not in axes or "combiner" not in axes:
        return None
    if axes["direction"] not in ("ul", "dl"):
        return None
    return f"eps_{axes['direction']}_{axes['combiner']}"


_DIR_COMB_COLS = ["eps_ul_mr", "eps_ul_mmse", "eps_dl_mr", "eps_dl_mmse"]


def _two_ue_angle_csv(records) -> str:
    table = _pivot(records, ("phi2_deg",), _series_dir_comb)
    points = _require_full(table, _DIR_COMB_COLS, ("phi2_deg",))
    rows = [[p[0]] + [table[p][c].value for c in _DIR_COMB_COLS]
            for p in points]
    return _csv(["phi2_deg"] + _DIR_COMB_COLS, rows)


def _asymptotic_csv(records) -> str:
    def series(rec):
        if rec.method == "asymptotic-prediction":
            return "eps_mr_prediction"
        return _series_dir_comb(rec)

    cols = _DIR_COMB_COLS + ["eps_mr_prediction"]
    table = _pivot(records, ("m",), series)
    points = _require_full(table, cols, ("m",))
    rows = [[p[0]] + [table[p][c].value for c in cols] for p in points]
    return _csv(["M"] + cols, rows)


def _availability_csv(records) -> str:
    names = {("ul", "mmse"): "eta_ul_mmse", ("dl", "mmse"): "eta_dl_mmse",
             ("ul", "mr"): "eta_ul_mr", ("dl", "mr"): "eta_dl_mr",
             ("dl-perfect", "mmse"): "eta_dl_mmse_perfect_csi"}

    def series(rec):
        if rec.method != "availability":
            return None
        return names.get((rec.axes["direction"], rec.axes["combiner"]))

    cols = ["eta_ul_mmse", "eta_dl_mmse", "eta_ul_mr", "eta_dl_mr",
            "eta_dl_mmse_perfect_csi"]
    table = _pivot(records, ("pilot_length",), series)
    points = _require_full(table, cols, ("pilot_length",))
    rows = [[p[0]] + [table[p][c].value for c in cols] for p in points]
    return _csv(["np"] + cols, rows)


_FIGURES = {
    "single-ue": _single_ue_csv,
    "two-ue-angle": _two_ue_angle_csv,
    "asymptotic": _asymptotic_csv,
    "availability": _availability_csv,
}


def write_manifest(path: str, spec: ExperimentSpec, wall_time_s: float,
                   outputs, num_records: int):
    """Canonical run manifest: config echo, hash, versions, timing."""
    import numpy
    import scipy

    import mimofbl

    manifest = {
        "config": spec.echo(),
        "config_hash": spec.config_hash(),
        "scenario": spec.scenario,
        "seed": spec.seed,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
            "mimofbl": mimofbl.__version__,
        },
        "wall_time_s": round(wall_time_s, 3),
        "outputs": sorted(outputs),
        "num_records": num_records,
    }
    payload = canonical_json(manifest)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(payload + "\n")
