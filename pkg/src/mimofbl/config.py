"""Strict JSON experiment configuration.

One flat JSON object per run.  Every key carries its unit in its name
where one applies (power_dbm, delta_deg, ue_distance_m); unknown keys
are errors, not warnings, so a typo cannot silently fall back to a
default.  dBm values are converted to linear watts exactly once, here;
everything downstream works in watts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

from .harness import (
    DEFAULT_ANTENNA_GRID,
    DEFAULT_ASYMPTOTIC_GRID,
    NetworkConfig,
)

SCENARIOS = ("single-ue", "two-ue-angle", "asymptotic", "availability",
             "kernel-validate")


class ConfigError(ValueError):
    """Raised for any malformed, unknown, or inconsistent config input."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


# key -> (type tag, default); None default means the key is required.
# type tags: int, num (float or int), str, bool, int_list
_COMMON_KEYS = {
    "scenario": ("str", None),
    "seed": ("int", None),
    "out_dir": ("str", "mimofbl_results"),
}

_CELL_KEYS = {
    "power_dbm": ("num", 10.0),
    "noise_dbm": ("num", -94.0),
    "delta_deg": ("num", 25.0),
    "cell_side_m": ("num", 75.0),
    "min_ue_distance_m": ("num", 5.0),
    "correlation": ("str", "local-scattering"),
}

_TWO_UE_KEYS = {
    **_CELL_KEYS,
    "M": ("int", 100),
    "n": ("int", 300),
    "b": ("int", 160),
    "shared_pilots": ("bool", True),
    "ue_distance_m": ("num", 36.4),
    "csi_at_ue": ("str", "hardening"),
    "num_fading": ("int", 1000),
    "num_hardening": ("int", 1000),
}

_SCENARIO_KEYS = {
    "single-ue": {
        "n": ("int", 100),
        "b": ("int", 60),
        "power_mode": ("str", "scaled"),
        "antenna_grid": ("int_list", list(DEFAULT_ANTENNA_GRID)),
        "num_fading": ("int", 10_000),
        "mc_samples_per_draw": ("int", 100),
    },
    "two-ue-angle": {
        **_TWO_UE_KEYS,
        "fixed_angle_deg": ("num", 30.0),
        "angle_min_deg": ("num", -20.0),
        "angle_max_deg": ("num", 80.0),
        "angle_points": ("int", 101),
    },
    "asymptotic": {
        **_TWO_UE_KEYS,
        "antenna_grid": ("int_list", list(DEFAULT_ASYMPTOTIC_GRID)),
        "phi1_deg": ("num", 30.0),
        "phi2_deg": ("num", 40.0),
        "num_fading": ("int", 2000),
    },
    "availability": {
        **_CELL_KEYS,
        "L": ("int", 4),
        "K": ("int", 10),
        "M": ("int", 100),
        "n": ("int", 300),
        "f": ("int", 4),
        "b": ("int", 160),
        "eps_target": ("num", 1e-5),
        "reuse_factors": ("int_list", [1, 2, 4, 8]),
        "num_placements": ("int", 500),
        "num_fading": ("int", 1000),
        "num_hardening": ("int", 1000),
    },
    "kernel-validate": {
        "n": ("int", 100),
        "num_channels": ("int", 10),
        "mc_samples": ("int", 100_000),
    },
}

# asymptotic and two-ue-angle drop the M-less keys they do not use
_SCENARIO_KEYS["asymptotic"].pop("M")


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully resolved experiment: scenario, seed, and every knob.

    values holds the resolved per-scenario keys (defaults applied), so
    two specs compare equal exactly when they would run identically.
    """

    scenario: str
    seed: int
    out_dir: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def echo(self) -> dict:
        """Canonical JSON-ready form; parse_config inverts it."""
        out = {"scenario": self.scenario, "seed": self.seed,
               "out_dir": self.out_dir}
        out.update(self.values)
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(
            canonical_json(self.echo()).encode("utf-8")).hexdigest()

    def network_config(self) -> NetworkConfig:
        """The deployment this spec describes, for scenarios that have one."""
        v = self.values
        if self.scenario == "availability":
            return NetworkConfig(
                num_cells=v["L"], users_per_cell=v["K"],
                num_antennas=v["M"], blocklength=v["n"],
                reuse_factor=v["f"], payload_bits=v["b"],
                **self._radio_kwargs())
        if self.scenario in ("two-ue-angle", "asymptotic"):
            return NetworkConfig(
                num_cells=1, users_per_cell=2,
                num_antennas=v.get("M", 100), blocklength=v["n"],
                reuse_factor=1, payload_bits=v["b"],
                csi_at_ue=v["csi_at_ue"], **self._radio_kwargs())
        raise ConfigError(
            f"scenario {self.scenario} has no deployment config")

    def _radio_kwargs(self) -> dict:
        v = self.values
        rho = dbm_to_watts(v["power_dbm"])
        sigma2 = dbm_to_watts(v["noise_dbm"])
        return dict(rho_ul=rho, rho_dl=rho, sigma2_ul=sigma2,
                    sigma2_dl=sigma2,
                    angular_spread=math.radians(v["delta_deg"]),
                    cell_side=v["cell_side_m"],
                    min_ue_distance=v["min_ue_distance_m"],
                    correlation=v["correlation"])


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, no whitespace, repr floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def _check_type(key: str, value, tag: str):
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}' must be an integer, "
                              f"got {value!r}")
        return value
    if tag == "num":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' must be a number, got {value!r}")
        val = float(value)
        if not math.isfinite(val):
            raise ConfigError(f"key '{key}' must be finite, got {value!r}")
        return val
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"key '{key}' must be true or false, "
                              f"got {value!r}")
        return value
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(f"key '{key}' must be a string, got {value!r}")
        return value
    if tag == "int_list":
        if (not isinstance(value, list) or not value
                or any(isinstance(x, bool) or not isinstance(x, int)
                       for x in value)):
            raise ConfigError(f"key '{key}' must be a nonempty list of "
                              f"integers, got {value!r}")
        return list(value)
    raise AssertionError(f"unhandled type tag {tag}")


_ENUM_KEYS = {
    "power_mode": ("scaled", "fixed"),
    "csi_at_ue": ("hardening", "perfect"),
    "correlation": ("local-scattering", "uncorrelated"),
}

_POSITIVE_KEYS = ("L", "K", "M", "n", "f", "b", "num_fading",
                  "num_placements", "num_hardening", "mc_samples_per_draw",
                  "num_channels", "mc_samples", "angle_points",
                  "cell_side_m", "min_ue_distance_m", "ue_distance_m")


def _validate_values(scenario: str, values: dict):
    for key, allowed in _ENUM_KEYS.items():
        if key in values and values[key] not in allowed:
            raise ConfigError(
                f"key '{key}' must be one of {allowed}, "
                f"got {values[key]!r}")
    for key in _POSITIVE_KEYS:
        if key in values and values[key] <= 0:
            raise ConfigError(f"key '{key}' must be positive, "
                              f"got {values[key]}")
    for key in ("antenna_grid", "reuse_factors"):
        if key in values:
            grid = values[key]
            if any(x < 1 for x in grid):
                raise ConfigError(f"key '{key}' entries must be positive")
            if sorted(set(grid)) != grid:
                raise ConfigError(
                    f"key '{key}' must be strictly ascending")
    if "eps_target" in values and not 0.0 <= values["eps_target"] <= 1.0:
        raise ConfigError("key 'eps_target' must lie in [0, 1]")
    if scenario == "two-ue-angle":
        if values["angle_points"] < 1:
            raise ConfigError("key 'angle_points' must be >= 1")
        if (values["angle_points"] > 1
                and values["angle_max_deg"] <= values["angle_min_deg"]):
            raise ConfigError(
                "key 'angle_max_deg' must exceed 'angle_min_deg'")
    if scenario == "single-ue" and values["b"] >= values["n"]:
        raise ConfigError("key 'b' must be below 'n' for a rate under "
                          "one bit per channel use")
    if scenario == "availability":
        users = values["K"]
        factors = set(values["reuse_factors"]) | {values["f"]}
        for f in sorted(factors):
            _check_block_split(values["n"], f * users,
                               f"keys 'n', 'f'={f}, 'K'")
    elif scenario in ("two-ue-angle", "asymptotic"):
        _check_block_split(values["n"], 2, "keys 'n' (two pilot symbols)")


def _check_block_split(blocklength: int, pilot_len: int, where: str):
    spare = blocklength - pilot_len
    if spare < 2:
        raise ConfigError(
            f"{where}: {pilot_len} pilot symbols leave no data uses "
            f"in a block of {blocklength}")
    if spare % 2:
        raise ConfigError(
            f"{where}: n minus the pilot length must be even to split "
            f"into equal uplink and downlink halves, got {spare}")


def _validate_deployment(spec: ExperimentSpec):
    """Cross-key invariants, enforced by building the deployment."""
    try:
        if spec.scenario == "availability":
            base = spec.network_config()
            from dataclasses import replace
            for f in spec["reuse_factors"]:
                replace(base, reuse_factor=f)
        elif spec.scenario in ("two-ue-angle", "asymptotic"):
            spec.network_config()
    except ValueError as exc:
        raise ConfigError(f"inconsistent configuration: {exc}") from exc


def parse_config(path: str, scenario_override: str | None = None
                 ) -> ExperimentSpec:
    """Read and strictly validate one experiment description.

    scenario_override substitutes for a missing 'scenario' key (and must
    agree with it when both are present).  Any key outside the chosen
    scenario's schema is an error naming that key.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config_dict(raw, scenario_override)


def parse_config_dict(raw, scenario_override: str | None = None
                      ) -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    scenario = raw.get("scenario", scenario_override)
    if scenario is None:
        raise ConfigError(
            "no scenario: set the 'scenario' key or pass --scenario")
    if not isinstance(scenario, str) or scenario not in SCENARIOS:
        raise ConfigError(
            f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if (scenario_override is not None and "scenario" in raw
            and raw["scenario"] != scenario_override):
        raise ConfigError(
            f"config says scenario {raw['scenario']!r} but the command "
            f"line says {scenario_override!r}")

    schema = {**_COMMON_KEYS, **_SCENARIO_KEYS[scenario]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(
            f"unknown key '{unknown[0]}' for scenario {scenario}"
            + (f" (also: {', '.join(unknown[1:])})" if len(unknown) > 1
               else ""))

    resolved = {}
    for key, (tag, default) in schema.items():
        if key == "scenario":
            continue
        if key in raw:
            resolved[key] = _check_type(key, raw[key], tag)
        elif default is None:
            raise ConfigError(f"missing required key '{key}'")
        else:
            resolved[key] = default

    seed = resolved.pop("seed")
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigError("key 'seed' must fit in 64 unsigned bits")
    out_dir = resolved.pop("out_dir")
    _validate_values(scenario, resolved)
    spec = ExperimentSpec(scenario=scenario, seed=seed, out_dir=out_dir,
                          values=resolved)
    _validate_deployment(spec)
    return spec
