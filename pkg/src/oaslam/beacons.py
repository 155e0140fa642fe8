"""Planar localization from acoustic beacon ranges.

Position comes from a Gauss-Newton fit of overlapping range circles:

    (x, y) = argmin sum_k (sqrt((x - x_k)^2 + (y - y_k)^2) - r_k)^2

With two beacons the mirror ambiguity is resolved by the basin of the
initial guess; a track solve seeds each timestamp with the previous
solution so the track stays on one branch.

Heading comes from the receiving array's per-beacon bearing phi_k:

    theta_k = (phi_k - atan2(y - y_k, x - x_k) - pi/2) mod 2pi

and per-beacon headings are fused by circular mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import HeadingUndefinedError, InputError, SolverError


@dataclass(frozen=True)
class BeaconSet:
    positions: np.ndarray        # (M, 2) world xy, M >= 2

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 2:
            raise InputError("beacon set needs at least two planar positions")
        for i in range(p.shape[0]):
            for j in range(i + 1, p.shape[0]):
                if np.allclose(p[i], p[j]):
                    raise InputError("beacon positions must be pairwise distinct")
        object.__setattr__(self, "positions", p)

    def __len__(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class RangeObservation:
    """Per-beacon ranges (None where missing) and array bearings at one time."""

    timestamp: float
    ranges: tuple[float | None, ...]
    array_bearings: tuple[float | None, ...] = ()


def trilaterate(obs: RangeObservation, beacons: BeaconSet,
                initial_guess) -> tuple[np.ndarray, float]:
    """Planar position and final residual norm from >= 2 ranges.

    Gauss-Newton, converged when the cost gradient norm drops below 1e-10;
    raises SolverError after 100 iterations without convergence.
    """
    present = [(k, r) for k, r in enumerate(obs.ranges) if r is not None]
    if len(present) < 2:
        raise InputError("trilateration needs at least two ranges")
    if any(r <= 0 for _, r in present):
        raise InputError("ranges must be positive")
    xy = np.asarray(initial_guess, dtype=float).copy()
    if xy.shape != (2,) or not np.all(np.isfinite(xy)):
        raise InputError("initial guess must be a finite (x, y)")
    anchors = beacons.positions[[k for k, _ in present]]
    ranges = np.array([r for _, r in present])

    for _ in range(100):
        diff = xy[None, :] - anchors
        dist = np.linalg.norm(diff, axis=1)
        while np.any(dist < 1e-9):
            # sitting exactly on a beacon: nudge and recompute
            xy = xy + 1e-6
            diff = xy[None, :] - anchors
            dist = np.linalg.norm(diff, axis=1)
        res = dist - ranges
        jac = diff / dist[:, None]
        grad = jac.T @ res
        if float(np.linalg.norm(2.0 * grad)) < 1e-10:
            return xy, float(np.linalg.norm(res))
        h = jac.T @ jac
        try:
            step = np.linalg.solve(h, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -res, rcond=None)[0]
        xy = xy + step
    raise SolverError("trilateration did not converge in 100 iterations")


def heading_from_array(phi_k: float, solved_xy, beacon_xy) -> float:
    """Vehicle heading from one array bearing, wrapped to [0, 2pi)."""
    dx = float(solved_xy[0]) - float(beacon_xy[0])
    dy = float(solved_xy[1]) - float(beacon_xy[1])
    if dx == 0.0 and dy == 0.0:
        raise HeadingUndefinedError("vehicle coincides with the beacon")
    return (phi_k - math.atan2(dy, dx) - 0.5 * math.pi) % (2.0 * math.pi)


def circular_mean(angles: list[float]) -> float:
    s = sum(math.sin(a) for a in angles)
    c = sum(math.cos(a) for a in angles)
    return math.atan2(s, c) % (2.0 * math.pi)


@dataclass(frozen=True)
class TrackPoint:
    timestamp: float
    x: float
    y: float
    heading: float | None
    residual: float


def solve_track(observations: list[RangeObservation], beacons: BeaconSet,
                initial_guess=(0.0, 0.0)) -> list[TrackPoint]:
    """Per-timestamp trilateration seeded by the previous solution.

    Timestamps with fewer than two ranges are emitted as gaps (skipped),
    never fabricated. Heading is the circular mean of the per-beacon
    estimates where array bearings are available.
    """
    guess = np.asarray(initial_guess, dtype=float)
    track: list[TrackPoint] = []
    for obs in observations:
        present = [r for r in obs.ranges if r is not None]
        if len(present) < 2:
            continue
        xy, res = trilaterate(obs, beacons, guess)
        guess = xy
        headings = []
        for k, phi in enumerate(obs.array_bearings):
            if phi is None or obs.ranges[k] is None:
                continue
            headings.append(heading_from_array(phi, xy, beacons.positions[k]))
        heading = circular_mean(headings) if headings else None
        track.append(TrackPoint(obs.timestamp, float(xy[0]), float(xy[1]),
                                heading, res))
    return track
