"""Range-scan containers and the cylindrical point-map projection.

Sensor frame: x forward, y left, z up (meters). A scan is projected onto an
H x W raster where rows index elevation and columns index azimuth:

    theta = atan2(y, x)                      azimuth
    phi   = asin(z / sqrt(x^2 + y^2 + z^2))  elevation
    row   = floor((phi - phi_min) / delta_phi)
    col   = floor((theta - theta_min) / delta_theta)

Each occupied cell stores (d, z) with d = sqrt(x^2 + y^2) plus a back-pointer
to the source point; empty cells hold (0, 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Per-point class tags. Non-negative values are vehicle ids.
TAG_BACKGROUND = -1
TAG_IGNORE = -2

# Total down/up-sampling factor of the network (vertical, horizontal).
NET_STRIDE_V = 8
NET_STRIDE_H = 16


@dataclass(frozen=True)
class ProjectionConfig:
    """Angular window and resolution of the point map. Angles in radians."""

    delta_theta: float
    delta_phi: float
    theta_min: float
    theta_max: float
    phi_min: float
    phi_max: float

    def __post_init__(self):
        if self.delta_theta <= 0 or self.delta_phi <= 0:
            raise ValueError("angular resolutions must be positive")
        if self.theta_max <= self.theta_min or self.phi_max <= self.phi_min:
            raise ValueError("angular window is empty")

    @property
    def rows(self) -> int:
        return math.ceil((self.phi_max - self.phi_min) / self.delta_phi)

    @property
    def cols(self) -> int:
        return math.ceil((self.theta_max - self.theta_min) / self.delta_theta)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def network_compatible(self) -> bool:
        """Whether H and W divide by the network's total stride."""
        return self.rows % NET_STRIDE_V == 0 and self.cols % NET_STRIDE_H == 0

    def require_network_compatible(self):
        if not self.network_compatible():
            raise ValueError(
                f"point map {self.rows}x{self.cols} is not divisible by the "
                f"network stride ({NET_STRIDE_V}, {NET_STRIDE_H})"
            )


def default_projection() -> ProjectionConfig:
    """Velodyne-64-like window: 0.2 deg/col, 0.4 deg/row, 448 x 64 cells."""
    d = math.radians
    return ProjectionConfig(
        delta_theta=d(0.2),
        delta_phi=d(0.4),
        theta_min=d(-44.8),
        theta_max=d(44.8),
        phi_min=d(-24.0),
        phi_max=d(1.6),
    )


@dataclass
class RawScan:
    """Point cloud with one class tag per point.

    points: (N, 3) float array.
    tags:   (N,) int array; TAG_BACKGROUND, TAG_IGNORE, or a vehicle id >= 0.
    """

    points: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.tags = np.asarray(self.tags, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.tags):
            raise ValueError(
                f"{len(self.points)} points but {len(self.tags)} tags"
            )
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scan contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def num_vehicles(self) -> int:
        vehicle = self.tags >= 0
        return int(self.tags[vehicle].max()) + 1 if vehicle.any() else 0


@dataclass
class PointMap:
    """Projected scan: (d, z) channels plus source back-pointers."""

    cfg: ProjectionConfig
    d: np.ndarray              # (H, W) horizontal distance, 0 where empty
    z: np.ndarray              # (H, W) height, 0 where empty
    source_index: np.ndarray   # (H, W) index into the scan, -1 where empty
    dropped_outside: int = 0   # points outside the angular window
    dropped_degenerate: int = 0  # zero-range points

    @property
    def occupied(self) -> np.ndarray:
        return self.source_index >= 0

    def channels(self, dtype=np.float32) -> np.ndarray:
        """Stack the (d, z) channels as the (2, H, W) network input."""
        return np.stack([self.d, self.z]).astype(dtype)


def scan_angles(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (theta, phi). Points at the origin yield phi = nan."""
    points = np.asarray(points, dtype=np.float64)
    rng = np.linalg.norm(points, axis=-1)
    theta = np.arctan2(points[..., 1], points[..., 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.arcsin(np.where(rng > 0, points[..., 2] / rng, np.nan))
    return theta, phi


def project_scan(scan: RawScan, cfg: ProjectionConfig) -> PointMap:
    """Project every in-window point; nearest point wins on cell collisions.

    Ties on exactly equal range keep the earliest point in scan order.
    """
    if len(scan) == 0:
        raise ValueError("cannot project an empty scan")
    pts = scan.points
    rng = np.linalg.norm(pts, axis=1)
    good = rng > 0.0
    n_degenerate = int((~good).sum())

    theta, phi = scan_angles(pts)
    inside = (
        good
        & (theta >= cfg.theta_min) & (theta < cfg.theta_max)
        & (phi >= cfg.phi_min) & (phi < cfg.phi_max)
    )
    rows = np.floor((phi[inside] - cfg.phi_min) / cfg.delta_phi).astype(np.int64)
    cols = np.floor((theta[inside] - cfg.theta_min) / cfg.delta_theta).astype(np.int64)
    # Guard against float round-up at the open upper boundary.
    valid = (rows >= 0) & (rows < cfg.rows) & (cols >= 0) & (cols < cfg.cols)
    idx = np.flatnonzero(inside)[valid]
    rows, cols = rows[valid], cols[valid]

    h, w = cfg.shape
    d_grid = np.zeros((h, w))
    z_grid = np.zeros((h, w))
    src = np.full((h, w), -1, dtype=np.int64)

    # Assign in descending (range, index) order so the minimal key lands last.
    order = np.lexsort((idx, rng[idx]))[::-1]
    r_o, c_o, i_o = rows[order], cols[order], idx[order]
    d_grid[r_o, c_o] = np.hypot(pts[i_o, 0], pts[i_o, 1])
    z_grid[r_o, c_o] = pts[i_o, 2]
    src[r_o, c_o] = i_o

    n_outside = int(good.sum()) - len(idx)
    return PointMap(cfg, d_grid, z_grid, src,
                    dropped_outside=n_outside,
                    dropped_degenerate=n_degenerate)


def cell_ray(cfg: ProjectionConfig, row: int, col: int) -> np.ndarray:
    """Unit direction through the center of cell (row, col)."""
    if not (0 <= row < cfg.rows and 0 <= col < cfg.cols):
        raise ValueError(f"cell ({row}, {col}) outside {cfg.shape} map")
    theta = cfg.theta_min + (col + 0.5) * cfg.delta_theta
    phi = cfg.phi_min + (row + 0.5) * cfg.delta_phi
    return np.array([
        math.cos(phi) * math.cos(theta),
        math.cos(phi) * math.sin(theta),
        math.sin(phi),
    ])


def all_cell_rays(cfg: ProjectionConfig) -> np.ndarray:
    """(H, W, 3) array of unit directions through every cell center."""
    theta = cfg.theta_min + (np.arange(cfg.cols) + 0.5) * cfg.delta_theta
    phi = cfg.phi_min + (np.arange(cfg.rows) + 0.5) * cfg.delta_phi
    cp, ct = np.cos(phi)[:, None], np.cos(theta)[None, :]
    return np.stack([
        cp * ct,
        cp * np.sin(theta)[None, :],
        np.broadcast_to(np.sin(phi)[:, None], (cfg.rows, cfg.cols)),
    ], axis=-1)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation; rotation must be proper orthonormal."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def rot_z(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = math.cos(angle), math.sin(angle)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
                   np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def apply_rigid_transform(scan: RawScan, t: RigidTransform) -> RawScan:
    """Map every point p -> R p + translation; tags are preserved."""
    return RawScan(t.apply(scan.points), scan.tags.copy())
