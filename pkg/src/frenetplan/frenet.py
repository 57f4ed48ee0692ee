"""Lane center-line and Cartesian <-> Frenet conversion.

The center-line is a polyline with arc-length parametrisation. Tangents are
linearly interpolated between vertex tangents so that the normal field is
continuous; ``to_frenet`` inverts ``to_global`` exactly by solving the
(quadratic) orthogonality condition on every segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCenterLine, OutOfCorridor, OutOfRange

DEFAULT_CORRIDOR = 20.0


def _rot90(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


@dataclass(frozen=True)
class CenterLine:
    points: np.ndarray  # (K, 2)
    cum_arclen: np.ndarray  # (K,)
    seg_dirs: np.ndarray = field(repr=False)  # (K-1, 2) unit segment directions
    vertex_tangents: np.ndarray = field(repr=False)  # (K, 2) unit tangents

    @property
    def length(self) -> float:
        return float(self.cum_arclen[-1])

    def _segment(self, s: float) -> tuple[int, float]:
        i = int(np.searchsorted(self.cum_arclen, s, side="right") - 1)
        i = min(max(i, 0), len(self.points) - 2)
        seg_len = self.cum_arclen[i + 1] - self.cum_arclen[i]
        return i, (s - self.cum_arclen[i]) / seg_len

    def tangent(self, s: float) -> np.ndarray:
        """Unit tangent at arc length ``s`` (interpolated between vertices)."""
        i, tau = self._segment(s)
        t = (1.0 - tau) * self.vertex_tangents[i] + tau * self.vertex_tangents[i + 1]
        return t / np.linalg.norm(t)

    def normal(self, s: float) -> np.ndarray:
        return _rot90(self.tangent(s))

    def position(self, s: float) -> np.ndarray:
        i, tau = self._segment(s)
        seg_len = self.cum_arclen[i + 1] - self.cum_arclen[i]
        return self.points[i] + tau * seg_len * self.seg_dirs[i]


@dataclass(frozen=True)
class FrenetPose:
    s: float
    d: float
    heading_rel: float
    speed: float


def build_centerline(points) -> CenterLine:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateCenterLine("center-line must be a list of [x, y] pairs")
    if len(pts) < 2:
        raise DegenerateCenterLine("center-line needs at least 2 points")
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len <= 1e-12):
        raise DegenerateCenterLine("consecutive center-line points must be distinct")
    dirs = seg / seg_len[:, None]
    tangents = np.empty_like(pts)
    tangents[0] = dirs[0]
    tangents[-1] = dirs[-1]
    if len(pts) > 2:
        mid = dirs[:-1] + dirs[1:]
        norms = np.linalg.norm(mid, axis=1)
        if np.any(norms < 1e-9):
            raise DegenerateCenterLine("center-line reverses direction")
        tangents[1:-1] = mid / norms[:, None]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    for arr in (pts, cum, dirs, tangents):
        arr.setflags(write=False)
    return CenterLine(points=pts, cum_arclen=cum, seg_dirs=dirs, vertex_tangents=tangents)


def to_global(cl: CenterLine, s: float, d: float) -> np.ndarray:
    if s < -1e-12 or s > cl.length + 1e-12:
        raise OutOfRange(f"s={s} outside [0, {cl.length}]")
    s = min(max(s, 0.0), cl.length)
    return cl.position(s) + d * cl.normal(s)


def _segment_roots(cl: CenterLine, i: int, xy: np.ndarray) -> list[float]:
    # (xy - c(tau)) . T(tau) = 0 with c linear and T linear in tau: a quadratic.
    p = cl.points[i]
    L = cl.cum_arclen[i + 1] - cl.cum_arclen[i]
    u = cl.seg_dirs[i]
    t0 = cl.vertex_tangents[i]
    delta = cl.vertex_tangents[i + 1] - t0
    w = xy - p
    c0 = float(w @ t0)
    c1 = float(w @ delta - L * (u @ t0))
    c2 = float(-L * (u @ delta))
    if abs(c2) < 1e-14 * max(1.0, abs(c1)):
        roots = [] if abs(c1) < 1e-300 else [-c0 / c1]
    else:
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc < 0.0:
            return []
        sq = math.sqrt(disc)
        qq = -0.5 * (c1 + math.copysign(sq, c1))
        roots = [qq / c2]
        if qq != 0.0:
            roots.append(c0 / qq)
    eps = 1e-12
    return [min(max(r, 0.0), 1.0) for r in roots if -eps <= r <= 1.0 + eps]


def to_frenet(cl: CenterLine, xy, corridor: float = DEFAULT_CORRIDOR) -> tuple[float, float]:
    """Return ``(s, d)`` of ``xy``; ``d > 0`` to the left of travel direction."""
    xy = np.asarray(xy, dtype=float)
    best = None
    for i in range(len(cl.points) - 1):
        L = cl.cum_arclen[i + 1] - cl.cum_arclen[i]
        for tau in _segment_roots(cl, i, xy):
            s = cl.cum_arclen[i] + tau * L
            r = xy - cl.position(s)
            dist = float(np.linalg.norm(r))
            if best is None or dist < best[0]:
                best = (dist, s, float(r @ cl.normal(s)))
    # Points beyond either end clamp to the nearest endpoint.
    for s in (0.0, cl.length):
        r = xy - cl.position(s)
        dist = float(np.linalg.norm(r))
        if best is None or dist < best[0] - 1e-12:
            best = (dist, s, float(r @ cl.normal(s)))
    dist, s, d = best
    if dist > corridor:
        raise OutOfCorridor(f"point {xy.tolist()} is {dist:.3f} m from the center-line (corridor {corridor} m)")
    return s, d


def pose_to_frenet(cl: CenterLine, xy, heading: float, speed: float, corridor: float = DEFAULT_CORRIDOR) -> FrenetPose:
    s, d = to_frenet(cl, xy, corridor)
    t = cl.tangent(s)
    rel = math.atan2(math.sin(heading - math.atan2(t[1], t[0])), math.cos(heading - math.atan2(t[1], t[0])))
    return FrenetPose(s=s, d=d, heading_rel=rel, speed=float(speed))


def velocity_to_frenet(cl: CenterLine, s: float, v) -> np.ndarray:
    """Rotate a global velocity into (longitudinal, lateral) components at ``s``."""
    t = cl.tangent(s)
    v = np.asarray(v, dtype=float)
    return np.array([v @ t, v @ _rot90(t)])
