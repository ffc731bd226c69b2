"""Planar polyline helpers shared by scenario generation, experts and metrics."""

from __future__ import annotations

import numpy as np


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_frame(points: np.ndarray, origin, heading: float) -> np.ndarray:
    """Express world ``points`` (..., 2) in a frame at ``origin`` rotated by ``heading``."""
    pts = np.asarray(points, dtype=float) - np.asarray(origin, dtype=float)
    return pts @ rotation(heading)


def vectors_to_frame(vectors: np.ndarray, heading: float) -> np.ndarray:
    return np.asarray(vectors, dtype=float) @ rotation(heading)


def from_frame(points: np.ndarray, origin, heading: float) -> np.ndarray:
    pts = np.asarray(points, dtype=float) @ rotation(heading).T
    return pts + np.asarray(origin, dtype=float)


class Polyline:
    """Arc-length parameterised polyline with linear extrapolation past both ends."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least two planar points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        keep = np.concatenate([[True], seg_len > 1e-9])
        pts = pts[keep]
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.points = pts
        self.seg_len = seg_len
        self.tangents = seg / seg_len[:, None]
        self.s = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def _segment(self, s):
        idx = np.searchsorted(self.s, s, side="right") - 1
        return np.clip(idx, 0, len(self.seg_len) - 1)

    def point_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        idx = self._segment(s)
        return self.points[idx] + (s - self.s[idx])[..., None] * self.tangents[idx]

    def tangent_at(self, s) -> np.ndarray:
        return self.tangents[self._segment(np.asarray(s, dtype=float))]

    def frenet_to_xy(self, s, d) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        t = self.tangent_at(s)
        normal = np.stack([-t[..., 1], t[..., 0]], axis=-1)
        return self.point_at(s) + np.asarray(d, dtype=float)[..., None] * normal

    def project(self, points):
        """Return (s, signed lateral offset) of each point's nearest polyline location."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts[:, None, :] - self.points[None, :-1, :]
        along = np.einsum("pmk,mk->pm", rel, self.tangents)
        along_c = np.clip(along, 0.0, self.seg_len[None, :])
        # first/last segments extend to infinity
        along_c[:, 0] = np.minimum(along[:, 0], self.seg_len[0])
        along_c[:, -1] = np.maximum(along[:, -1], 0.0) if len(self.seg_len) > 1 else along[:, -1]
        foot = self.points[None, :-1, :] + along_c[..., None] * self.tangents[None]
        diff = pts[:, None, :] - foot
        dist2 = np.einsum("pmk,pmk->pm", diff, diff)
        best = np.argmin(dist2, axis=1)
        rows = np.arange(len(pts))
        t = self.tangents[best]
        cross = t[:, 0] * diff[rows, best, 1] - t[:, 1] * diff[rows, best, 0]
        s = self.s[best] + along_c[rows, best]
        return s, cross

    def distance(self, points) -> np.ndarray:
        _, d = self.project(points)
        return np.abs(d)

    def headings(self) -> np.ndarray:
        return np.arctan2(self.tangents[:, 1], self.tangents[:, 0])


def curvature(points) -> tuple[np.ndarray, np.ndarray]:
    """Signed curvature from heading finite differences over arc length.

    Returns arc-length stations (segment midpoints' vertices) and curvature values.
    """
    line = Polyline(points)
    heading = np.unwrap(line.headings())
    if len(heading) < 2:
        return line.s[:1].copy(), np.zeros(1)
    mid = 0.5 * (line.s[:-1] + line.s[1:])
    dk = np.diff(heading) / np.diff(mid)
    return line.s[1:-1].copy(), dk
