"""Oriented 3D boxes and the rotation-invariant corner encoding.

A box observed from anchor point p is encoded per corner as

    c' = R^T (c - p),    R = R_z(theta) R_y(-phi)

where (theta, phi) are the anchor's azimuth/elevation. R's first column is
the unit vector from the sensor to p and its second column is horizontal, so
the 24-d concatenation of the 8 encoded corners is invariant to rotating the
whole scene about z.

Canonical corner order: bottom face counterclockwise seen from above,
starting at box-local (+x, +y); then the top face in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Box-local corner signs in canonical order, scaled by half extents.
_CORNER_SIGNS = np.array([
    [+1, +1, -1],
    [-1, +1, -1],
    [-1, -1, -1],
    [+1, -1, -1],
    [+1, +1, +1],
    [-1, +1, +1],
    [-1, -1, +1],
    [+1, -1, +1],
], dtype=np.float64)


class BoxFitError(ValueError):
    """Corner set does not form a rigid box within tolerance."""

    def __init__(self, residual: float, tol: float):
        self.residual = residual
        super().__init__(
            f"worst corner residual {residual:.6f} m exceeds tolerance {tol:g} m"
        )


def normalize_angle(angle: float) -> float:
    """Wrap into (-pi, pi]."""
    a = (angle + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if a == -math.pi else a


@dataclass
class Box3D:
    """Oriented box: center, extents along box-local axes, yaw about z."""

    center: np.ndarray
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError("box extents must be positive")
        if not np.all(np.isfinite(self.center)):
            raise ValueError("box center must be finite")
        self.yaw = normalize_angle(float(self.yaw))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Box3D":
        """The box after rotating about z and translating the whole scene."""
        rotation = np.asarray(rotation, dtype=np.float64)
        if abs(rotation[2, 2] - 1.0) > 1e-9 or np.any(np.abs(rotation[2, :2]) > 1e-9):
            raise ValueError("box transform must rotate about z only")
        angle = math.atan2(rotation[1, 0], rotation[0, 0])
        return Box3D(rotation @ self.center + np.asarray(translation),
                     self.length, self.width, self.height,
                     self.yaw + angle)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box, faces padded by margin."""
        local = (np.atleast_2d(points) - self.center) @ self.rotation()
        half = np.array([self.length, self.width, self.height]) / 2.0 + margin
        return np.all(np.abs(local) <= half, axis=1)


def corners_from_params(box: Box3D) -> np.ndarray:
    """(8, 3) world-frame corners in canonical order."""
    half = np.array([box.length, box.width, box.height]) / 2.0
    return (_CORNER_SIGNS * half) @ box.rotation().T + box.center


def observation_basis(p: np.ndarray) -> np.ndarray:
    """Rotation whose first column points from the sensor at p.

    Columns: r_x along the ray to p, r_y horizontal, r_z = r_x x r_y.
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    rng = np.linalg.norm(p)
    if rng == 0.0:
        raise ValueError("observation direction undefined at the origin")
    theta = math.atan2(p[1], p[0])
    phi = math.asin(p[2] / rng)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(phi), math.sin(phi)
    # R_z(theta) @ R_y(-phi); the y-rotation sign makes R e1 point at p.
    return np.array([
        [ct * cp, -st, -ct * sp],
        [st * cp, ct, -st * sp],
        [sp, 0.0, cp],
    ])


def encode_box(box: Box3D, p: np.ndarray) -> np.ndarray:
    """24-d encoding: each corner mapped to R^T (c - p), then concatenated."""
    r = observation_basis(p)
    corners = corners_from_params(box)
    return ((corners - np.asarray(p, dtype=np.float64)) @ r).reshape(24)


def decode_box(enc: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_box; returns (8, 3) world-frame corners."""
    r = observation_basis(p)
    local = np.asarray(enc, dtype=np.float64).reshape(8, 3)
    return local @ r.T + np.asarray(p, dtype=np.float64)


def observation_bases(points: np.ndarray) -> np.ndarray:
    """Vectorized observation_basis: (N, 3) anchors -> (N, 3, 3) rotations."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rng = np.linalg.norm(points, axis=1)
    if np.any(rng == 0.0):
        raise ValueError("observation direction undefined at the origin")
    theta = np.arctan2(points[:, 1], points[:, 0])
    phi = np.arcsin(points[:, 2] / rng)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    zeros = np.zeros_like(ct)
    return np.stack([
        np.stack([ct * cp, -st, -ct * sp], axis=-1),
        np.stack([st * cp, ct, -st * sp], axis=-1),
        np.stack([sp, zeros, cp], axis=-1),
    ], axis=1)


def encode_box_at(box: Box3D, anchors: np.ndarray) -> np.ndarray:
    """encode_box over many anchor points at once; returns (N, 24)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    bases = observation_bases(anchors)
    offsets = corners_from_params(box)[None, :, :] - anchors[:, None, :]
    return np.einsum("nkj,nji->nki", offsets, bases).reshape(-1, 24)


def decode_boxes(encs: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """decode_box over many (encoding, anchor) pairs; returns (N, 8, 3)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    local = np.asarray(encs, dtype=np.float64).reshape(-1, 8, 3)
    bases = observation_bases(anchors)
    return np.einsum("nkj,nij->nki", local, bases) + anchors[:, None, :]


# Corner index pairs whose differences run along each box-local axis.
_X_EDGES = [(0, 1), (3, 2), (4, 5), (7, 6)]
_Y_EDGES = [(0, 3), (1, 2), (4, 7), (5, 6)]
_Z_EDGES = [(4, 0), (5, 1), (6, 2), (7, 3)]


def params_from_corners(corners: np.ndarray, tol: float = 1e-3) -> Box3D:
    """Fit center/extents/yaw to a canonical corner set.

    Edge vectors along each box axis are averaged; yaw comes from the mean
    +x edge projected to the ground plane. Raises BoxFitError when the
    reconstructed corners deviate from the input by more than tol.
    """
    corners = np.asarray(corners, dtype=np.float64).reshape(8, 3)
    ex = np.mean([corners[a] - corners[b] for a, b in _X_EDGES], axis=0)
    ey = np.mean([corners[a] - corners[b] for a, b in _Y_EDGES], axis=0)
    ez = np.mean([corners[a] - corners[b] for a, b in _Z_EDGES], axis=0)
    length, width, height = (np.linalg.norm(e) for e in (ex, ey, ez))
    if min(length, width, height) <= 0:
        raise BoxFitError(float("inf"), tol)
    box = Box3D(corners.mean(axis=0), length, width, height,
                math.atan2(ex[1], ex[0]))
    residual = float(np.abs(corners_from_params(box) - corners).max())
    if residual > tol:
        raise BoxFitError(residual, tol)
    return box
