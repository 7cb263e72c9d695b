"""Separable storage Hamiltonians on the vertices and quadratic controller
Hamiltonians on the edges."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "VertexHamiltonian",
    "ControllerHamiltonian",
    "HydraulicParams",
    "quadratic",
    "even_power",
    "hydraulic",
    "gradient",
    "bregman_shift",
    "total_energy",
    "shifted_storage",
]

MAX_POWER = 4
GRAVITY = 9.81


def _vec(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    arr = arr.ravel()
    if arr.size != n:
        raise ValueError(f"{name}: expected {n} entries, got {arr.size}")
    return arr


@dataclass(frozen=True, eq=False)
class VertexHamiltonian:
    """H(x) = sum_i w_i/(2 p_i) (x_i - c_i)^(2 p_i) - s_i x_i - k_i.

    ``p_i = 1`` is the quadratic case. The linear part (slope ``s``, offset
    ``k``) is only non-zero after a Bregman shift of a higher even power.
    """

    weight: np.ndarray
    center: np.ndarray
    power: np.ndarray
    slope: np.ndarray = field(default=None)
    offset: np.ndarray = field(default=None)

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=float).ravel()
        n = weight.size
        center = _vec(self.center, n, "center")
        power = np.asarray(self.power, dtype=int)
        power = np.full(n, int(power)) if power.ndim == 0 else power.ravel()
        if power.size != n:
            raise ValueError(f"power: expected {n} entries, got {power.size}")
        slope = np.zeros(n) if self.slope is None else _vec(self.slope, n, "slope")
        offset = np.zeros(n) if self.offset is None else _vec(self.offset, n, "offset")
        if np.any(weight <= 0) or not np.all(np.isfinite(weight)):
            raise ValueError("vertex Hamiltonian weights must be positive and finite")
        if np.any(power < 1) or np.any(power > MAX_POWER):
            raise ValueError(f"powers must lie in 1..{MAX_POWER}")
        for name, arr in (("weight", weight), ("center", center), ("power", power),
                          ("slope", slope), ("offset", offset)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.weight.size

    @property
    def is_quadratic(self) -> bool:
        return bool(np.all(self.power == 1) and not np.any(self.slope))

    @property
    def gamma(self) -> np.ndarray:
        """Per-vertex minimizer (where the gradient vanishes)."""
        if not np.any(self.slope):
            return self.center.copy()
        odd = 2 * self.power - 1
        ratio = self.slope / self.weight
        return self.center + np.sign(ratio) * np.abs(ratio) ** (1.0 / odd)

    def values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = x - self.center
        p2 = 2 * self.power
        return self.weight / p2 * d**p2 - self.slope * x - self.offset

    def __call__(self, x) -> float:
        return float(np.sum(self.values(x)))

    def gradient(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.center
        return self.weight * d ** (2 * self.power - 1) - self.slope

    def hessian_diag(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.center
        odd = 2 * self.power - 1
        return self.weight * odd * d ** (odd - 1)


@dataclass(frozen=True, eq=False)
class ControllerHamiltonian:
    """H_c(eta) = 1/2 sum_j w_j eta_j^2; unit weights give 1/2 ||eta||^2."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=float).ravel()
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("controller Hamiltonian weights must be positive and finite")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @classmethod
    def standard(cls, m: int) -> "ControllerHamiltonian":
        return cls(np.ones(m))

    @property
    def m(self) -> int:
        return self.weight.size

    @property
    def is_standard(self) -> bool:
        return bool(np.all(self.weight == 1.0))

    def __call__(self, eta) -> float:
        eta = np.asarray(eta, dtype=float)
        return 0.5 * float(np.sum(self.weight * eta * eta))

    def gradient(self, eta) -> np.ndarray:
        return self.weight * np.asarray(eta, dtype=float)

    def inverse_gradient(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) / self.weight


@dataclass(frozen=True)
class HydraulicParams:
    area: np.ndarray
    rho: float = 1.0
    g: float = GRAVITY
    ref_height: np.ndarray | float = 0.0

    def __post_init__(self):
        area = np.atleast_1d(np.asarray(self.area, dtype=float))
        if np.any(area <= 0) or self.rho <= 0 or self.g <= 0:
            raise ValueError("area, rho and g must be positive")
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "ref_height", _vec(self.ref_height, area.size, "ref_height"))


def quadratic(weight, gamma, n: int | None = None) -> VertexHamiltonian:
    n = n if n is not None else np.size(weight) if np.ndim(weight) else np.size(gamma)
    return VertexHamiltonian(_vec(weight, n, "weight"), _vec(gamma, n, "gamma"), 1)


def even_power(weight, gamma, p, n: int | None = None) -> VertexHamiltonian:
    n = n if n is not None else max(np.size(weight), np.size(gamma), np.size(p))
    power = np.asarray(p, dtype=int)
    power = np.full(n, int(power)) if power.ndim == 0 else power
    return VertexHamiltonian(_vec(weight, n, "weight"), _vec(gamma, n, "gamma"), power)


def hydraulic(params: HydraulicParams) -> VertexHamiltonian:
    """Cylindrical reservoirs: H_i = rho g / (2 S_i) (x_i - S_i h_ref_i)^2,
    so the output is the pressure above the reference height."""
    weight = params.rho * params.g / params.area
    return VertexHamiltonian(weight, params.area * params.ref_height, 1)


def gradient(h: VertexHamiltonian, x) -> np.ndarray:
    return h.gradient(x)


def bregman_shift(h: VertexHamiltonian, x_bar) -> VertexHamiltonian:
    """Bregman distance of ``h`` about ``x_bar``: minimizer moves to ``x_bar``
    and the value there is zero."""
    x_bar = _vec(x_bar, h.n, "x_bar")
    if not np.all(np.isfinite(x_bar)):
        raise ValueError("x_bar must be finite")
    quad = (h.power == 1) & (h.slope == 0)
    if np.all(quad):
        return VertexHamiltonian(h.weight, x_bar, 1)
    base = VertexHamiltonian(h.weight, h.center, h.power)
    slope = base.gradient(x_bar)
    offset = base.values(x_bar) - slope * x_bar
    slope[quad] = 0.0
    offset[quad] = 0.0
    center = np.where(quad, x_bar, h.center)
    return VertexHamiltonian(h.weight, center, h.power, slope, offset)


def total_energy(h: VertexHamiltonian, hc: ControllerHamiltonian, x, eta) -> float:
    return h(x) + hc(eta)


def shifted_storage(
    h: VertexHamiltonian, hc: ControllerHamiltonian, eta_bar
) -> Callable[[np.ndarray, np.ndarray], float]:
    """Storage function shifted to a matched controller state ``eta_bar``."""
    eta_bar = np.asarray(eta_bar, dtype=float)
    grad_bar = hc.gradient(eta_bar)
    hc_bar = hc(eta_bar)

    def value(x, eta):
        eta = np.asarray(eta, dtype=float)
        return h(x) + hc(eta) - float(grad_bar @ (eta - eta_bar)) - hc_bar

    return value
