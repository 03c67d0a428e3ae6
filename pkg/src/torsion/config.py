"""Run configuration: a JSON document with dotted-path overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from .grid import GridSpec
from .irekm import GAMMA_RULES, PriorSpec
from .observe import AngleSet, SolverSettings
from .plasticity import InadmissibleParamsError, MaterialParams, check_admissible
from .rng import default_seed

__all__ = ["ConfigError", "DEFAULTS", "load_config", "apply_override", "RunConfig"]

DEFAULTS: dict[str, Any] = {
    "grid": {"a": 1.0, "b": 1.0, "Nx": 50, "Ny": 50},
    "solver": {"tol": 1e-6, "max_iter": 200, "linear_tol": 1e-10, "method": "cholesky"},
    "material": {"kappa": 0.3, "xi0_sq": 0.02, "G": 42.3},
    "test": None,
    "phi": 1.0,
    "angles": [1.0, 0.5, 0.1, 0.005],
    "sigma": 1e-4,
    "seed": None,
    "prior": {"kappa": [0.2, 0.9], "xi0_sq": [0.0, 0.15], "G": [42.0, 43.0]},
    "irekm": {
        "n_ensemble": 200,
        "rho": 0.7,
        "gamma0": 1.0,
        "tau": None,
        "max_iter": 100,
        "delta": None,
        "gamma_rule": "scaled",
    },
    "data": None,
    "output": "out",
    "jobs": 1,
    "reproduce": {"seeds": 3, "types": None, "sigmas": None},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> None:
    """Set ``cfg[a][b]... = value`` for ``dotted = "a.b..."``; string values are parsed as JSON when possible."""
    keys = dotted.split(".")
    node = cfg
    for i, key in enumerate(keys[:-1]):
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[: i + 1])!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = _parse_value(value) if isinstance(value, str) else value


def load_config(path: str | Path | None = None, overrides: list[tuple[str, Any]] = ()) -> "RunConfig":
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        _merge(cfg, doc)
    for key, value in overrides:
        apply_override(cfg, key, value)
    return RunConfig(cfg)


class RunConfig:
    """Validated accessors over the raw configuration dictionary."""

    def __init__(self, raw: dict):
        self.raw = raw

    def _get(self, dotted: str):
        node = self.raw
        for key in dotted.split("."):
            node = node[key]
        return node

    def _wrap(self, key: str, build):
        try:
            return build()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    def grid(self) -> GridSpec:
        g = self._get("grid")
        return self._wrap("grid", lambda: GridSpec(float(g["a"]), float(g["b"]), g["Nx"], g["Ny"]))

    def solver(self) -> SolverSettings:
        s = self._get("solver")
        return self._wrap(
            "solver",
            lambda: SolverSettings(
                self.grid(), float(s["tol"]), int(s["max_iter"]), float(s["linear_tol"]), str(s["method"])
            ),
        )

    def material(self) -> MaterialParams:
        theta = self._wrap("material", lambda: MaterialParams.from_dict(self._get("material")))
        violations = check_admissible(theta)
        if violations:
            raise ConfigError(f"material: {InadmissibleParamsError(violations)}")
        return theta

    def phi(self) -> float:
        phi = self._wrap("phi", lambda: float(self._get("phi")))
        if not phi > 0:
            raise ConfigError(f"phi: twist angle must be positive, got {phi}")
        return phi

    def angles(self) -> AngleSet:
        return self._wrap("angles", lambda: AngleSet(self._get("angles")))

    def sigma(self) -> float:
        sigma = self._wrap("sigma", lambda: float(self._get("sigma")))
        if not sigma >= 0:
            raise ConfigError(f"sigma: must be >= 0, got {sigma}")
        return sigma

    def seed(self) -> int:
        seed = self._get("seed")
        if seed is None:
            return self._wrap("seed", default_seed)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed: must be a non-negative integer, got {seed!r}")
        return seed

    def prior(self) -> PriorSpec:
        return self._wrap("prior", lambda: PriorSpec.from_dict(self._get("prior")))

    def irekm(self) -> dict:
        k = dict(self._get("irekm"))
        checks = {
            "n_ensemble": isinstance(k["n_ensemble"], int) and k["n_ensemble"] >= 2,
            "rho": isinstance(k["rho"], (int, float)) and 0 < k["rho"] < 1,
            "gamma0": isinstance(k["gamma0"], (int, float)) and k["gamma0"] > 0,
            "tau": k["tau"] is None or (isinstance(k["tau"], (int, float)) and k["tau"] > 0),
            "max_iter": isinstance(k["max_iter"], int) and k["max_iter"] >= 1,
            "delta": k["delta"] is None or (isinstance(k["delta"], (int, float)) and k["delta"] >= 0),
            "gamma_rule": k["gamma_rule"] in GAMMA_RULES,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ConfigError("; ".join(f"irekm.{name}: invalid value {k[name]!r}" for name in bad))
        return k

    def jobs(self) -> int:
        jobs = self._get("jobs")
        if not isinstance(jobs, int) or jobs < 1:
            raise ConfigError(f"jobs: must be a positive integer, got {jobs!r}")
        return jobs

    def output(self) -> Path:
        return Path(str(self._get("output")))
