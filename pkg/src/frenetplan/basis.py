"""Bernstein polynomial basis on a uniform time grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

from .errors import DimensionMismatch, InvalidBasisConfig

DEFAULT_DEGREE = 10
DEFAULT_HORIZON = 6.0
DEFAULT_SAMPLES = 30


def bernstein_matrix(degree: int, tau: np.ndarray) -> np.ndarray:
    """Values of all degree-``degree`` Bernstein polynomials at ``tau`` in [0, 1]."""
    tau = np.asarray(tau, dtype=float)[:, None]
    j = np.arange(degree + 1)[None, :]
    coeff = np.array([comb(degree, k) for k in range(degree + 1)], dtype=float)[None, :]
    return coeff * tau**j * (1.0 - tau) ** (degree - j)


def bernstein_derivative(degree: int, order: int, t: np.ndarray, horizon: float) -> np.ndarray:
    """``order``-th time derivative of the Bernstein basis scaled to [0, horizon].

    Uses d^k B_{j,n}/dtau^k = n!/(n-k)! * sum_i (-1)^(k-i) C(k, i) B_{j-i, n-k}.
    """
    t = np.asarray(t, dtype=float)
    n = degree
    out = np.zeros((t.size, n + 1))
    if order > n:
        return out
    lower = bernstein_matrix(n - order, t / horizon)  # (m, n-order+1)
    scale = factorial(n) / factorial(n - order) / horizon**order
    for i in range(order + 1):
        out[:, i : i + n - order + 1] += (-1) ** (order - i) * comb(order, i) * lower
    return scale * out


@dataclass(frozen=True)
class BasisSet:
    degree: int
    horizon: float
    m: int
    t: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)
    Wd: np.ndarray = field(repr=False)
    Wdd: np.ndarray = field(repr=False)
    Wddd: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.horizon / (self.m - 1)

    @property
    def n_coeffs(self) -> int:
        return self.degree + 1

    def rows_at(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Basis rows (value, first, second derivative) at arbitrary times in [0, horizon]."""
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), 0.0, self.horizon)
        return tuple(bernstein_derivative(self.degree, k, t, self.horizon) for k in range(3))


@dataclass(frozen=True)
class TrajSamples:
    x: np.ndarray
    y: np.ndarray
    xd: np.ndarray
    yd: np.ndarray
    xdd: np.ndarray
    ydd: np.ndarray


def make_basis(degree: int = DEFAULT_DEGREE, horizon: float = DEFAULT_HORIZON, m: int = DEFAULT_SAMPLES) -> BasisSet:
    if degree < 3:
        raise InvalidBasisConfig(f"degree must be >= 3, got {degree}")
    if not horizon > 0:
        raise InvalidBasisConfig(f"horizon must be positive, got {horizon}")
    if m < degree + 1:
        raise InvalidBasisConfig(f"need m >= degree+1 samples, got m={m}, degree={degree}")
    t = np.linspace(0.0, horizon, m)
    mats = [bernstein_derivative(degree, k, t, horizon) for k in range(4)]
    for a in (t, *mats):
        a.setflags(write=False)
    return BasisSet(degree, float(horizon), m, t, *mats)


def split_xi(xi: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 2 * n:
        raise DimensionMismatch(f"expected coefficient vector of length {2 * n}, got {xi.shape[-1]}")
    return xi[..., :n], xi[..., n:]


def eval_traj(basis: BasisSet, xi: np.ndarray) -> TrajSamples:
    """Sample positions, velocities and accelerations of ``xi = (cx, cy)``.

    ``xi`` may carry leading batch dimensions; sample arrays then have shape
    ``(..., m)``.
    """
    cx, cy = split_xi(xi, basis.n_coeffs)
    return TrajSamples(
        x=cx @ basis.W.T,
        y=cy @ basis.W.T,
        xd=cx @ basis.Wd.T,
        yd=cy @ basis.Wd.T,
        xdd=cx @ basis.Wdd.T,
        ydd=cy @ basis.Wdd.T,
    )


def linear_coeffs(basis: BasisSet, offset: float, rate: float) -> np.ndarray:
    """Bernstein coefficients of ``offset + rate * t`` on [0, horizon]."""
    j = np.arange(basis.n_coeffs)
    return offset + rate * basis.horizon * j / basis.degree
