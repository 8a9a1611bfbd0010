"""Projection, rigid/deformable edits of rays and neural points, and 2D -> 3D
mask lifting with nearest-neighbour registration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .scene import Camera, DepthMap, Mask2D, Mask3D, NeuralPointCloud, Ray
from .spatial import PointIndex, median_spacing


def rotation_matrix(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (any nonzero length)."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if not n > 0 or not np.isfinite(n):
        raise ValueError("rotation axis must be a nonzero finite vector")
    k = axis / n
    th = np.deg2rad(degrees)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * (Kx @ Kx)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("R must be orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def rotation(cls, axis, degrees, pivot=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation about an axis through ``pivot``."""
        R = rotation_matrix(axis, degrees)
        c = np.asarray(pivot, dtype=np.float64)
        return cls(R, c - R @ c)

    @classmethod
    def translation(cls, vector) -> "RigidTransform":
        return cls(np.eye(3), vector)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)


@dataclass(frozen=True, eq=False)
class DeformSpec:
    """Scale (per-axis factors) or shear (3x3, unit diagonal) about ``pivot``."""

    kind: str
    pivot: np.ndarray
    params: np.ndarray

    def __post_init__(self):
        pivot = np.array(self.pivot, dtype=np.float64).reshape(3)
        if self.kind == "scale":
            p = np.array(self.params, dtype=np.float64).reshape(3)
            if np.any(p <= 0):
                raise ValueError("scale factors must be > 0")
        elif self.kind == "shear":
            p = np.array(self.params, dtype=np.float64).reshape(3, 3)
            if np.abs(np.diag(p) - 1).max() > 1e-12:
                raise ValueError("shear matrix must have a unit diagonal")
            if abs(np.linalg.det(p)) < 1e-12:
                raise ValueError("shear matrix must be invertible")
        else:
            raise ValueError(f"unknown deformation kind {self.kind!r}")
        object.__setattr__(self, "pivot", pivot)
        object.__setattr__(self, "params", p)

    @classmethod
    def scale(cls, factors, pivot=(0.0, 0.0, 0.0)) -> "DeformSpec":
        return cls("scale", pivot, np.broadcast_to(np.asarray(factors, dtype=np.float64), (3,)))

    @classmethod
    def shear(cls, matrix, pivot=(0.0, 0.0, 0.0)) -> "DeformSpec":
        return cls("shear", pivot, matrix)

    def linear(self) -> np.ndarray:
        return np.diag(self.params) if self.kind == "scale" else self.params


def apply_rigid_point(T: RigidTransform, p) -> np.ndarray:
    """``R p + t`` for one point or an (..., 3) array."""
    p = np.asarray(p, dtype=np.float64)
    return p @ T.R.T + T.t


def apply_rigid_ray(T: RigidTransform, r: Ray) -> Ray:
    # directions are free vectors: rotate only, no translation
    d = T.R @ r.direction
    return Ray(T.R @ r.origin + T.t, d / np.linalg.norm(d), r.t_near, r.t_far)


def apply_deform_point(d: DeformSpec, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return d.pivot + (p - d.pivot) @ d.linear().T


EditOp = Union[str, RigidTransform, DeformSpec]


def edit_masked_points(cloud: NeuralPointCloud, mask: Mask3D, op: EditOp):
    """Apply ``op`` ("remove", a RigidTransform or a DeformSpec) to the masked
    points. Returns ``(edited_cloud, vacated_positions)`` where the vacated
    positions are the original positions of every masked point."""
    mask.validate(len(cloud))
    idx = mask.indices
    vacated = cloud.positions[idx].copy()
    if len(idx) == 0:
        return cloud, vacated
    if isinstance(op, str):
        if op != "remove":
            raise ValueError(f"unknown edit op {op!r}")
        keep = np.ones(len(cloud), dtype=bool)
        keep[idx] = False
        return cloud.subset(np.flatnonzero(keep)), vacated
    pos = cloud.positions.copy()
    if isinstance(op, RigidTransform):
        pos[idx] = apply_rigid_point(op, pos[idx])
    elif isinstance(op, DeformSpec):
        pos[idx] = apply_deform_point(op, pos[idx])
    else:
        raise TypeError(f"unsupported edit op {type(op).__name__}")
    return cloud.replace(positions=pos), vacated


# ----------------------------------------------------------------------
# projection


def project(cam: Camera, points):
    """World points -> continuous pixel coordinates ``(u, v)`` (pixel ``i``
    spans ``[i, i+1)``) and camera z-depth."""
    x = np.asarray(points, dtype=np.float64) @ cam.R.T + cam.t
    z = x[..., 2]
    uvw = x @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = uvw[..., 0] / z - 0.5
        v = uvw[..., 1] / z - 0.5
    return u, v, z


def unproject_pixels(cam: Camera, u, v, depth) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    pix = np.stack([u + 0.5, v + 0.5, np.ones_like(u)], axis=-1)
    x_cam = depth[..., None] * (pix @ np.linalg.inv(cam.K).T)
    return (x_cam - cam.t) @ cam.R


def _check_raster(cam: Camera, raster_w: int, raster_h: int, what: str) -> None:
    if (raster_w, raster_h) != (cam.width, cam.height):
        raise ValueError(f"{what} raster {raster_w}x{raster_h} does not match camera {cam.width}x{cam.height}")


def unproject_depth(cam: Camera, depth: DepthMap, feature_dim: int = 1) -> NeuralPointCloud:
    """Point per finite-depth pixel in row-major order (omega 1, zero features)."""
    _check_raster(cam, depth.width, depth.height, "depth")
    v, u = np.nonzero(depth.valid)
    pts = unproject_pixels(cam, u, v, depth.values[v, u])
    return NeuralPointCloud.from_positions(pts, feature_dim)


def lift_mask(cam: Camera, depth: DepthMap, m: Mask2D):
    """3D points of masked pixels with finite depth.

    Returns ``(points (M, 3), skipped)`` where ``skipped`` counts masked pixels
    lacking depth.
    """
    _check_raster(cam, depth.width, depth.height, "depth")
    _check_raster(cam, m.width, m.height, "mask")
    sel = m.raster & depth.valid
    v, u = np.nonzero(sel)
    pts = unproject_pixels(cam, u, v, depth.values[v, u])
    return pts.reshape(-1, 3), int(m.raster.sum() - sel.sum())


def register_mask(lifted, cloud: NeuralPointCloud, radius: float | None = None) -> Mask3D:
    """Indices of cloud points whose nearest lifted point is within ``radius``
    (default: twice the cloud's median nearest-neighbour spacing)."""
    lifted = np.asarray(lifted, dtype=np.float64).reshape(-1, 3)
    if radius is None:
        radius = 2.0 * median_spacing(cloud.positions)
    if not radius > 0:
        raise ValueError("radius must be > 0")
    if len(lifted) == 0 or len(cloud) == 0:
        return Mask3D(np.zeros(0, dtype=np.int64))
    idx, _ = PointIndex(lifted).knn_batch(cloud.positions, 1, max_distance=radius)
    return Mask3D(np.flatnonzero(idx[:, 0] >= 0))


def segment(cameras, depths, masks, cloud: NeuralPointCloud, radius: float | None = None):
    """Lift every given view's mask and register the union onto ``cloud``.

    Returns ``(Mask3D, stats)`` with counts of lifted points, registered
    points, remaining points and masked pixels without depth.
    """
    lifted, skipped = [], 0
    for cam, dm, m in zip(cameras, depths, masks):
        pts, sk = lift_mask(cam, dm, m)
        lifted.append(pts)
        skipped += sk
    lifted = np.concatenate(lifted) if lifted else np.zeros((0, 3))
    m3 = register_mask(lifted, cloud, radius)
    stats = {
        "lifted": len(lifted),
        "registered": len(m3),
        "remaining": len(cloud) - len(m3),
        "skipped_pixels": skipped,
    }
    return m3, stats
