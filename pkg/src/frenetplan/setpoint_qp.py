"""Setpoint-tracking equality-constrained QP.

The objective, summed over the time grid, is

    w_s (xdd^2 + ydd^2)
  + w_l (ydd + kappa_p (y - y_d) + kappa_v yd)^2
  + w_v (xdd + kappa_p (xd - v_d))^2

subject to initial position/velocity/acceleration per axis, optional terminal
position/velocity rows and optional identity rows pinning coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .basis import BasisSet
from .errors import DimensionMismatch, RankDeficientConstraints, SingularKkt


@dataclass(frozen=True)
class SetpointWeights:
    w_s: float = 1.0
    w_l: float = 1.0
    w_v: float = 1.0
    kappa_p: float = 1.0
    kappa_v: float = 2.0
    # Optional jerk penalty; zero keeps the acceleration-smoothness form.
    w_jerk: float = 0.0

    def __post_init__(self):
        if min(self.w_s, self.w_l, self.w_v, self.w_jerk) < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.kappa_p <= 0 or self.kappa_v <= 0:
            raise ValueError("gains kappa_p, kappa_v must be positive")


@dataclass(frozen=True)
class PartialSolution:
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        vals = np.asarray(self.values, dtype=float)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise DimensionMismatch("partial solution indices and values must be 1-D of equal length")
        if len(np.unique(idx)) != len(idx) or np.any(np.diff(idx) <= 0):
            raise ValueError("partial solution indices must be sorted and unique")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class BehavioralInput:
    v_d: float
    y_d: float
    # (x_T, xd_T, y_T, yd_T) terminal position/velocity per axis.
    p_term: Optional[np.ndarray] = None
    partial: Optional[PartialSolution] = None

    def __post_init__(self):
        if not np.isfinite(self.v_d) or not np.isfinite(self.y_d):
            raise ValueError("setpoints must be finite")
        if self.p_term is not None:
            pt = np.asarray(self.p_term, dtype=float)
            if pt.shape != (4,):
                raise DimensionMismatch("p_term must be (x_T, xd_T, y_T, yd_T)")
            object.__setattr__(self, "p_term", pt)

    @property
    def p(self) -> np.ndarray:
        return np.array([self.v_d, self.y_d])

    def with_p(self, p) -> "BehavioralInput":
        return BehavioralInput(float(p[0]), float(p[1]), self.p_term, self.partial)


@dataclass(frozen=True)
class EgoBoundary:
    """Initial (x, xd, xdd) and (y, yd, ydd) in the Frenet frame."""

    x: float = 0.0
    xd: float = 0.0
    xdd: float = 0.0
    y: float = 0.0
    yd: float = 0.0
    ydd: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("boundary state must be finite")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.xd, self.xdd, self.y, self.yd, self.ydd], dtype=float)


@dataclass(frozen=True)
class QpProblem:
    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    const: float = 0.0
    # dq/dp and db/d(inputs): used for differentiation.
    dq_dp: np.ndarray = field(default=None, repr=False)

    def objective(self, xi: np.ndarray) -> float:
        return float(0.5 * xi @ self.Q @ xi + self.q @ xi + self.const)


def _axis_operators(basis: BasisSet, w: SetpointWeights):
    """Residual operators: list of (weight, block, matrix, rhs_per_unit_setpoint)."""
    kp, kv = w.kappa_p, w.kappa_v
    Lx = basis.Wdd + kp * basis.Wd  # residual = Lx cx - kp v_d
    Ly = basis.Wdd + kv * basis.Wd + kp * basis.W  # residual = Ly cy - kp y_d
    return Lx, Ly


def equality_rows(basis: BasisSet, b0: EgoBoundary, p: BehavioralInput) -> tuple[np.ndarray, np.ndarray]:
    n = basis.n_coeffs
    Z = np.zeros(n)
    rows, rhs = [], []
    bv = b0.vector
    for axis in range(2):
        for r, mat in enumerate((basis.W, basis.Wd, basis.Wdd)):
            row = np.concatenate([mat[0], Z] if axis == 0 else [Z, mat[0]])
            rows.append(row)
            rhs.append(bv[3 * axis + r])
    if p.p_term is not None:
        for axis in range(2):
            for r, mat in enumerate((basis.W, basis.Wd)):
                row = np.concatenate([mat[-1], Z] if axis == 0 else [Z, mat[-1]])
                rows.append(row)
                rhs.append(p.p_term[2 * axis + r])
    if p.partial is not None:
        idx = p.partial.indices
        if idx.size and (idx[0] < 0 or idx[-1] >= 2 * n):
            raise DimensionMismatch(f"partial indices must lie in [0, {2 * n})")
        eye = np.eye(2 * n)
        rows.extend(eye[idx])
        rhs.extend(p.partial.values)
    return np.array(rows), np.array(rhs, dtype=float)


def build_qp(basis: BasisSet, w: SetpointWeights, p: BehavioralInput, b0: EgoBoundary) -> QpProblem:
    n = basis.n_coeffs
    Lx, Ly = _axis_operators(basis, w)
    kp = w.kappa_p
    ones = np.ones(basis.m)

    Qx = w.w_s * basis.Wdd.T @ basis.Wdd + w.w_v * Lx.T @ Lx + w.w_jerk * basis.Wddd.T @ basis.Wddd
    Qy = w.w_s * basis.Wdd.T @ basis.Wdd + w.w_l * Ly.T @ Ly + w.w_jerk * basis.Wddd.T @ basis.Wddd
    Q = np.zeros((2 * n, 2 * n))
    Q[:n, :n] = 2.0 * Qx
    Q[n:, n:] = 2.0 * Qy

    # q is linear in (v_d, y_d): q = dq_dp @ p
    dq_dp = np.zeros((2 * n, 2))
    dq_dp[:n, 0] = -2.0 * w.w_v * kp * (Lx.T @ ones)
    dq_dp[n:, 1] = -2.0 * w.w_l * kp * (Ly.T @ ones)
    q = dq_dp @ p.p
    const = basis.m * kp**2 * (w.w_v * p.v_d**2 + w.w_l * p.y_d**2)

    A, b = equality_rows(basis, b0, p)
    return QpProblem(Q=Q, q=q, A=A, b=b, const=float(const), dq_dp=dq_dp)


def kkt_matrix(H: np.ndarray, A: np.ndarray) -> np.ndarray:
    k = A.shape[0]
    return np.block([[H, A.T], [A, np.zeros((k, k))]])


@dataclass(frozen=True)
class KktSolver:
    """LU factorization of [[H, A^T], [A, 0]] reusable for many right-hand sides."""

    n: int
    lu: tuple = field(repr=False)

    @classmethod
    def factor(cls, H: np.ndarray, A: np.ndarray) -> "KktSolver":
        if A.shape[0] and np.linalg.matrix_rank(A) < A.shape[0]:
            raise RankDeficientConstraints(f"equality matrix with {A.shape[0]} rows is rank deficient")
        K = kkt_matrix(H, A)
        cond = np.linalg.cond(K)
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularKkt(f"KKT matrix is singular (cond={cond:.3g})")
        return cls(n=H.shape[0], lu=scipy.linalg.lu_factor(K, check_finite=False))

    def solve(self, top: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve for (primal, dual) given stacked rhs; accepts batches along the last axis."""
        rhs = np.concatenate([top, b], axis=0)
        sol = scipy.linalg.lu_solve(self.lu, rhs, check_finite=False)
        return sol[: self.n], sol[self.n :]


def solve_eq_qp(qp: QpProblem) -> tuple[np.ndarray, np.ndarray]:
    kkt = KktSolver.factor(qp.Q, qp.A)
    xi, nu = kkt.solve(-qp.q, qp.b)
    # One step of iterative refinement keeps the KKT residual at round-off level.
    r_top = -qp.q - qp.Q @ xi - qp.A.T @ nu
    r_bot = qp.b - qp.A @ xi
    dxi, dnu = kkt.solve(r_top, r_bot)
    return xi + dxi, nu + dnu


def kkt_residuals(qp: QpProblem, xi: np.ndarray, nu: np.ndarray) -> tuple[float, float]:
    """Scaled stationarity and primal residuals."""
    stat = np.max(np.abs(qp.Q @ xi + qp.q + qp.A.T @ nu)) / (1.0 + np.max(np.abs(qp.q)))
    prim = np.max(np.abs(qp.A @ xi - qp.b)) / (1.0 + np.max(np.abs(qp.b)))
    return float(stat), float(prim)


def setpoint_jacobian_rhs(basis: BasisSet, qp: QpProblem, p: BehavioralInput) -> dict[str, np.ndarray]:
    """Derivatives of the KKT right-hand side [-q; b] w.r.t. each input block."""
    nrows = qp.A.shape[0]
    out = {"p": np.vstack([-qp.dq_dp, np.zeros((nrows, 2))])}
    n2 = qp.Q.shape[0]
    offset = 6
    if p.p_term is not None:
        d = np.zeros((n2 + nrows, 4))
        for k in range(4):
            d[n2 + offset + k, k] = 1.0
        out["p_term"] = d
        offset += 4
    if p.partial is not None:
        k = len(p.partial.indices)
        d = np.zeros((n2 + nrows, k))
        for j in range(k):
            d[n2 + offset + j, j] = 1.0
        out["partial"] = d
    return out


def solve_setpoint(basis: BasisSet, w: SetpointWeights, p: BehavioralInput, b0: EgoBoundary) -> np.ndarray:
    xi, _ = solve_eq_qp(build_qp(basis, w, p, b0))
    return xi


def batch_setpoint_solve(
    basis: BasisSet, w: SetpointWeights, inputs: Sequence[BehavioralInput], b0: EgoBoundary
) -> np.ndarray:
    """Solve many setpoint QPs sharing Q and A with one factorization.

    All inputs must share the same equality structure (same p_term/partial
    presence and indices); rows of the result are the solutions.
    """
    qp0 = build_qp(basis, w, inputs[0], b0)
    kkt = KktSolver.factor(qp0.Q, qp0.A)
    P = np.array([bi.p for bi in inputs])  # (B, 2)
    Bs = np.array([equality_rows(basis, b0, bi)[1] for bi in inputs])  # (B, k)
    top = -(qp0.dq_dp @ P.T)
    xi, _ = kkt.solve(top, Bs.T)
    return xi.T
