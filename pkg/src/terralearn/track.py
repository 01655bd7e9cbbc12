"""Closed reference path and the geometric queries the controllers use."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .vehicle import wrap_angle

# Distances closer than this are treated as ties in nearest-point queries.
_TIE_TOL = 1e-12


class PathQuery(NamedTuple):
    nearest_point: np.ndarray
    cross_track: float
    tangent: np.ndarray
    arc_position: float
    side: float  # +1 left of the tangent, -1 right, 0 on the path


@dataclass(frozen=True, eq=False)
class Track:
    """Closed polyline with a constant desired speed along it.

    The last waypoint connects back to the first; the closing segment must
    not be repeated in ``waypoints``.
    """

    waypoints: np.ndarray
    desired_speed: float = 0.2

    def __post_init__(self):
        pts = np.array(self.waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ValueError("a track needs at least 3 (x, y) waypoints")
        if not np.all(np.isfinite(pts)):
            raise ValueError("waypoints must be finite")
        if not (math.isfinite(self.desired_speed) and self.desired_speed >= 0):
            raise ValueError("desired_speed must be finite and non-negative")
        seg = np.roll(pts, -1, axis=0) - pts
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("track has a zero-length segment")
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        for arr in (pts, seg, lengths, cum):
            arr.setflags(write=False)
        object.__setattr__(self, "waypoints", pts)
        object.__setattr__(self, "_seg", seg)
        object.__setattr__(self, "_len", lengths)
        object.__setattr__(self, "arc_table", cum)

    @property
    def length(self) -> float:
        return float(self.arc_table[-1])

    @classmethod
    def from_file(cls, path, desired_speed: float = 0.2) -> "Track":
        """Read a plain-text track: one ``x y`` pair per line, ``#`` comments allowed."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                x, y = line.replace(",", " ").split()[:2]
                rows.append((float(x), float(y)))
        if len(rows) > 3 and rows[0] == rows[-1]:
            rows.pop()
        return cls(np.array(rows), desired_speed)

    def to_file(self, path) -> None:
        Path(path).write_text("".join(f"{float(x)!r} {float(y)!r}\n" for x, y in self.waypoints))

    # -- queries ----------------------------------------------------------

    def project(self, positions) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised projection of ``(P, 2)`` positions onto the polyline.

        Returns ``(nearest_points, distances, segment_index, arc_positions)``.
        """
        pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        rel = pos[:, None, :] - self.waypoints[None, :, :]
        t = np.einsum("psk,sk->ps", rel, self._seg) / (self._len ** 2)
        np.clip(t, 0.0, 1.0, out=t)
        foot = self.waypoints[None, :, :] + t[..., None] * self._seg[None, :, :]
        dist = np.hypot(pos[:, None, 0] - foot[..., 0], pos[:, None, 1] - foot[..., 1])
        arc = self.arc_table[:-1][None, :] + t * self._len[None, :]
        # ties within tolerance go to the lowest arc position
        dmin = dist.min(axis=1, keepdims=True)
        arc_masked = np.where(dist <= dmin + _TIE_TOL, arc, np.inf)
        idx = np.argmin(arc_masked, axis=1)
        rows = np.arange(len(pos))
        return foot[rows, idx], dist[rows, idx], idx, arc[rows, idx] % self.length

    def nearest(self, pos) -> PathQuery:
        point, dist, idx, arc = self.project(pos)
        tangent = self._seg[idx[0]] / self._len[idx[0]]
        off = np.asarray(pos, dtype=float) - point[0]
        side = float(np.sign(tangent[0] * off[1] - tangent[1] * off[0]))
        return PathQuery(point[0], float(dist[0]), tangent, float(arc[0]), side)

    def point_at(self, arc):
        """Position(s) at arc length ``arc`` (wrapped to the track length)."""
        s = np.mod(np.asarray(arc, dtype=float), self.length)
        idx = np.clip(np.searchsorted(self.arc_table, s, side="right") - 1, 0, len(self._len) - 1)
        frac = (s - self.arc_table[idx]) / self._len[idx]
        return self.waypoints[idx] + frac[..., None] * self._seg[idx]

    def tangent_at(self, arc) -> np.ndarray:
        s = np.mod(np.asarray(arc, dtype=float), self.length)
        idx = np.clip(np.searchsorted(self.arc_table, s, side="right") - 1, 0, len(self._len) - 1)
        return self._seg[idx] / self._len[idx][..., None]

    def arc_delta(self, arc_from: float, arc_to: float) -> float:
        """Signed shortest along-track displacement between two arc positions."""
        half = 0.5 * self.length
        return (arc_to - arc_from + half) % self.length - half


def lookahead(track: Track, pose, look_distance: float) -> np.ndarray:
    """Point ``look_distance`` further along the track than the nearest point."""
    if look_distance < 0:
        raise ValueError("look-ahead distance must be non-negative")
    q = track.nearest(pose[:2])
    return track.point_at(q.arc_position + look_distance)


def intersection_angle(pose, target) -> float:
    """Signed angle from the body heading to the line of sight to ``target``."""
    dx, dy = target[0] - pose[0], target[1] - pose[1]
    return float(wrap_angle(math.atan2(dy, dx) - pose[2]))


def reference_states(track: Track, pose, n: int, dt: float) -> np.ndarray:
    """``n`` reference states marching along the track at the desired speed.

    Rows are ``[x, y, vx, vy, heading, 0]`` with the velocity tangent to the
    path; row ``j`` sits ``(j + 1) * V_d * dt`` ahead of the nearest point.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    arc0 = track.nearest(pose[:2]).arc_position
    arcs = arc0 + track.desired_speed * dt * np.arange(1, n + 1)
    pts = track.point_at(arcs)
    tan = track.tangent_at(arcs)
    out = np.zeros((n, 6))
    out[:, :2] = pts
    out[:, 2:4] = track.desired_speed * tan
    out[:, 4] = np.arctan2(tan[:, 1], tan[:, 0])
    return out


def stadium(straight: float = 1.4, radius: float = 0.8, spacing: float = 0.05,
            center=(0.0, 0.0), desired_speed: float = 0.2) -> Track:
    """Two straights joined by semicircles, traversed counter-clockwise.

    Straights run along ``x`` (down/up the slope); the default fits inside a
    3 m x 2 m patch.
    """
    cx, cy = center
    half = 0.5 * straight
    n_str = max(1, round(straight / spacing))
    n_arc = max(2, round(math.pi * radius / spacing))
    pts = []
    # bottom straight, heading +x
    for i in range(n_str):
        pts.append((cx - half + straight * i / n_str, cy - radius))
    # right arc, from -90 deg to +90 deg
    for i in range(n_arc):
        a = -math.pi / 2 + math.pi * i / n_arc
        pts.append((cx + half + radius * math.cos(a), cy + radius * math.sin(a)))
    # top straight, heading -x
    for i in range(n_str):
        pts.append((cx + half - straight * i / n_str, cy + radius))
    # left arc, from +90 deg to 270 deg
    for i in range(n_arc):
        a = math.pi / 2 + math.pi * i / n_arc
        pts.append((cx - half + radius * math.cos(a), cy + radius * math.sin(a)))
    return Track(np.array(pts), desired_speed)
