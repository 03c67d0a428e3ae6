"""Plasticity functions ``g(xi^2)`` and the Ramberg-Osgood material parameters."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

__all__ = [
    "MaterialParams",
    "ParameterBox",
    "PlasticityFn",
    "InadmissibleParamsError",
    "check_admissible",
    "clamp_to_box",
    "g_ramberg_osgood",
    "g_rational",
    "ramberg_osgood",
    "rational",
]


class InadmissibleParamsError(ValueError):
    """Material parameters outside ``0 <= kappa <= 1``, ``xi0_sq > 0``, ``G > 0``."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("inadmissible material parameters: " + "; ".join(self.violations))


@dataclass(frozen=True)
class MaterialParams:
    """Ramberg-Osgood parameters.

    Attributes
    ----------
    kappa : float
        Strain-hardening exponent in ``[0, 1]`` (1 is purely elastic).
    xi0_sq : float
        Yield stress, in units of the stress intensity ``|grad u|^2``.
    G : float
        Shear modulus.
    """

    kappa: float
    xi0_sq: float
    G: float

    def as_array(self) -> np.ndarray:
        return np.array([self.kappa, self.xi0_sq, self.G], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "MaterialParams":
        kappa, xi0_sq, G = (float(v) for v in arr)
        return cls(kappa, xi0_sq, G)

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "xi0_sq": self.xi0_sq, "G": self.G}

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialParams":
        return cls(float(d["kappa"]), float(d["xi0_sq"]), float(d["G"]))

    def to_json(self, path: Union[str, Path, None] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, text_or_path: Union[str, Path]) -> "MaterialParams":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        return cls.from_dict(json.loads(text))


def check_admissible(theta: MaterialParams) -> list[str]:
    """Return the list of violated bounds; empty means admissible."""
    violations = []
    if not theta.kappa >= 0:
        violations.append(f"kappa<0 (kappa={theta.kappa})")
    if not theta.kappa <= 1:
        violations.append(f"kappa>1 (kappa={theta.kappa})")
    if not theta.xi0_sq > 0:
        violations.append(f"xi0_sq<=0 (xi0_sq={theta.xi0_sq})")
    if not theta.G > 0:
        violations.append(f"G<=0 (G={theta.G})")
    return violations


def _require_admissible(theta: MaterialParams):
    violations = check_admissible(theta)
    if violations:
        raise InadmissibleParamsError(violations)


@dataclass(frozen=True)
class ParameterBox:
    """Per-coordinate ``[lower, upper]`` bounds in ``(kappa, xi0_sq, G)`` order."""

    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box bounds must have three entries (kappa, xi0_sq, G)")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError(f"box needs finite lower < upper, got {self.lower}, {self.upper}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    def clip(self, arr: np.ndarray) -> np.ndarray:
        """Clamp an ``(..., 3)`` array of parameter triples into the box."""
        return np.clip(arr, self.lower, self.upper)

    def contains(self, arr: np.ndarray) -> bool:
        arr = np.asarray(arr, float)
        return bool(np.all(arr >= self.lower) and np.all(arr <= self.upper))


def clamp_to_box(theta: MaterialParams, box: ParameterBox) -> MaterialParams:
    return MaterialParams.from_array(box.clip(theta.as_array()))


@dataclass(frozen=True)
class PlasticityFn:
    """A named plasticity function, vectorised over ``xi^2``."""

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    params: MaterialParams | None = None

    def __call__(self, xi_sq):
        return self.func(xi_sq)

    def check_positive(self, upper: float, n: int = 257) -> bool:
        """Spot-check ``g > 0`` on ``[0, upper]``."""
        g = self.func(np.linspace(0.0, upper, n))
        return bool(np.all(np.isfinite(g)) and np.all(g > 0))


def _ro_eval(xi_sq, kappa, xi0_sq, G):
    # parameters may be arrays broadcasting against xi_sq (one triple per stacked field)
    xi_sq = np.asarray(xi_sq, dtype=float)
    compliance = 1.0 / G
    ratio = np.maximum(xi_sq, xi0_sq) / xi0_sq
    return np.where(xi_sq <= xi0_sq, compliance, compliance * np.power(ratio, 0.5 * (1.0 - kappa)))


def g_ramberg_osgood(xi_sq, theta: MaterialParams):
    """Ramberg-Osgood compliance: ``1/G`` up to yield, power-law hardening beyond it."""
    _require_admissible(theta)
    if np.any(np.asarray(xi_sq) < 0):
        raise ValueError("xi_sq must be non-negative")
    out = _ro_eval(xi_sq, theta.kappa, theta.xi0_sq, theta.G)
    return float(out) if out.ndim == 0 else out


def g_rational(xi_sq):
    """``1 / (1 + xi^2)``."""
    xi_sq = np.asarray(xi_sq, dtype=float)
    if np.any(xi_sq < 0):
        raise ValueError("xi_sq must be non-negative")
    out = 1.0 / (1.0 + xi_sq)
    return float(out) if out.ndim == 0 else out


def ramberg_osgood(theta: MaterialParams) -> PlasticityFn:
    """Bind ``theta`` into a :class:`PlasticityFn` (validated once, here)."""
    _require_admissible(theta)
    kappa, xi0_sq, G = theta.kappa, theta.xi0_sq, theta.G
    return PlasticityFn(
        f"ramberg_osgood(kappa={kappa:g}, xi0_sq={xi0_sq:g}, G={G:g})",
        lambda xi_sq: _ro_eval(xi_sq, kappa, xi0_sq, G),
        theta,
    )


def rational() -> PlasticityFn:
    return PlasticityFn("rational", lambda xi_sq: 1.0 / (1.0 + np.asarray(xi_sq, dtype=float)))
