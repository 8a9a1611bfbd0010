"""Scene representation: neural point clouds, pinhole cameras, rays, masks,
depth maps, and a seeded synthetic scene generator with analytic ground truth.

Conventions used everywhere in the package:

* world -> camera: ``x_cam = R @ x_world + t``; camera looks down ``+z``,
  image ``u`` grows along camera ``+x`` and ``v`` along camera ``+y``.
* pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``; rasters are
  row-major arrays indexed ``[v, u]``.
* depth maps hold camera-frame ``z``; ``inf`` marks "no depth".
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NO_DEPTH = np.inf


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class NeuralPointCloud:
    """Positions (N, 3), confidences (N,) in [0, 1] and features (N, F)."""

    positions: np.ndarray
    confidences: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.size == 0:
            pos = _frozen(pos.reshape(0, 3))
        conf = _frozen(self.confidences).reshape(-1)
        feat = _frozen(self.features)
        if feat.ndim == 1:
            feat = _frozen(feat.reshape(len(pos), -1) if len(pos) else feat.reshape(0, max(1, feat.size)))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if feat.ndim != 2 or feat.shape[1] < 1:
            raise ValueError(f"features must be (N, F) with F >= 1, got {feat.shape}")
        if not (len(pos) == len(conf) == len(feat)):
            raise ValueError(
                f"length mismatch: {len(pos)} positions, {len(conf)} confidences, {len(feat)} features"
            )
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(feat))):
            raise ValueError("positions and features must be finite")
        if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "features", feat)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def empty(cls, feature_dim: int) -> "NeuralPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, feature_dim)))

    @classmethod
    def from_positions(cls, positions, feature_dim: int = 1) -> "NeuralPointCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        return cls(positions, np.ones(n), np.zeros((n, feature_dim)))

    def subset(self, indices) -> "NeuralPointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return NeuralPointCloud(self.positions[idx], self.confidences[idx], self.features[idx])

    def concat(self, other: "NeuralPointCloud") -> "NeuralPointCloud":
        if other.feature_dim != self.feature_dim:
            raise ValueError("feature dimension mismatch")
        return NeuralPointCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.confidences, other.confidences]),
            np.concatenate([self.features, other.features]),
        )

    def replace(self, positions=None, confidences=None, features=None) -> "NeuralPointCloud":
        return NeuralPointCloud(
            self.positions if positions is None else positions,
            self.confidences if confidences is None else confidences,
            self.features if features is None else features,
        )

    def revision(self) -> str:
        """Content hash; changes whenever any array changes."""
        h = hashlib.blake2b(digest_size=16)
        for a in (self.positions, self.confidences, self.features):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(self.features.shape).encode())
        return h.hexdigest()

    def geometry_revision(self) -> str:
        return hashlib.blake2b(np.ascontiguousarray(self.positions).tobytes(), digest_size=16).hexdigest()


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = _frozen(self.origin).reshape(3)
        d = _frozen(self.direction).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, s):
        s = np.asarray(s, dtype=np.float64)
        return self.origin + s[..., None] * self.direction


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``R, t`` map world to camera coordinates."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _frozen(self.K).reshape(3, 3)
        R = _frozen(self.R).reshape(3, 3)
        t = _frozen(self.t).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("R must be a proper rotation")
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if not (fx > 0 and fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError("principal point must lie inside the raster")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, width, height, R=None, t=None) -> "Camera":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, width, height)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        y = -(up - up.dot(z) * z)
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        R = np.stack([x, y, z])
        cx = width / 2 if cx is None else cx
        cy = height / 2 if cy is None else cy
        return cls.from_intrinsics(fx, fy, cx, cy, width, height, R=R, t=-R @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]), int(d["width"]), int(d["height"]))

    def pixel_directions(self, u=None, v=None) -> np.ndarray:
        """Unit world-space directions through pixel centers; defaults to the
        full raster, returned with shape (H, W, 3)."""
        if u is None:
            v, u = np.mgrid[0 : self.height, 0 : self.width]
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        pix = np.stack([u + 0.5, v + 0.5, np.ones_like(u)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.K).T
        d_world = d_cam @ self.R
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def optical_axis(self) -> np.ndarray:
        return self.R[2].copy()


def camera_ray(cam: Camera, u: int, v: int, t_near: float = 0.0, t_far: float = 1e3) -> Ray:
    """Ray from the camera center through the center of pixel ``(u, v)``."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} raster")
    return Ray(cam.center, cam.pixel_directions(u, v), t_near, t_far)


@dataclass(frozen=True, eq=False)
class Mask2D:
    """Pixel mask stored as a boolean raster ``[v, u]``; the pixel set is
    its nonzero support."""

    raster: np.ndarray
    prompts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "raster", _frozen(self.raster, dtype=bool))
        if self.raster.ndim != 2:
            raise ValueError("mask raster must be 2D")
        for u, v in self.prompts:
            if not (0 <= u < self.width and 0 <= v < self.height):
                raise ValueError(f"prompt ({u}, {v}) outside raster")

    @classmethod
    def empty(cls, width: int, height: int) -> "Mask2D":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels: Sequence[tuple[int, int]], prompts=()) -> "Mask2D":
        r = np.zeros((height, width), dtype=bool)
        for u, v in pixels:
            if not (0 <= u < width and 0 <= v < height):
                raise ValueError(f"pixel ({u}, {v}) outside raster")
            r[v, u] = True
        return cls(r, tuple(prompts))

    @property
    def width(self) -> int:
        return self.raster.shape[1]

    @property
    def height(self) -> int:
        return self.raster.shape[0]

    def pixels(self) -> list[tuple[int, int]]:
        v, u = np.nonzero(self.raster)
        return list(zip(u.tolist(), v.tolist()))

    def __len__(self) -> int:
        return int(self.raster.sum())


@dataclass(frozen=True, eq=False)
class Mask3D:
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if np.any(idx < 0):
            raise ValueError("indices must be non-negative")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate indices")
        object.__setattr__(self, "indices", _frozen(np.sort(idx), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.indices)

    def validate(self, n_points: int) -> None:
        if len(self.indices) and self.indices[-1] >= n_points:
            raise ValueError(f"mask index {self.indices[-1]} out of range for {n_points} points")

    def complement(self, n_points: int) -> "Mask3D":
        keep = np.ones(n_points, dtype=bool)
        keep[self.indices] = False
        return Mask3D(np.flatnonzero(keep))


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2:
            raise ValueError("depth raster must be 2D")
        fin = np.isfinite(vals)
        if np.any(np.isnan(vals)) or np.any(vals[fin] <= 0) or np.any(vals == -np.inf):
            raise ValueError("depth values must be > 0 or the no-depth sentinel")
        object.__setattr__(self, "values", vals)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)


# ----------------------------------------------------------------------
# synthetic scenes


@dataclass
class BackgroundSpec:
    """Textured wall ``z = wall_z`` (world units)."""

    wall_z: float = 1.6
    checker_period: float = 0.6
    noise_cell: float = 0.45
    checker_mix: float = 0.45


@dataclass
class ObjectSpec:
    kind: str = "sphere"  # sphere | box | none
    center: tuple = (0.0, 0.0, 0.0)
    size: float = 0.85  # sphere radius or box half-extent


@dataclass
class TrajectorySpec:
    count: int = 4
    radius: float = 4.0
    arc_degrees: float = 30.0
    height: float = 0.3
    look_at: tuple = (0.0, 0.0, 0.0)


@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 32
    height: int = 32
    focal: float = 30.0
    feature_dim: int = 8
    point_spacing: float = 0.09
    t_near: float = 1.5
    t_far: float = 9.0
    surface_density: float = 20.0
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    object: ObjectSpec = field(default_factory=ObjectSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)

    def validate(self) -> None:
        if self.trajectory.count < 2:
            raise ValueError("scene needs at least 2 cameras")
        if not self.trajectory.radius > 0:
            raise ValueError("degenerate trajectory: radius must be > 0")
        if self.object.kind not in ("sphere", "box", "none"):
            raise ValueError(f"unknown object kind {self.object.kind!r}")
        if self.object.kind != "none" and not self.object.size > 0:
            raise ValueError("degenerate object: size must be > 0")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4 to encode density and color exactly")
        if self.width < 1 or self.height < 1 or not self.focal > 0:
            raise ValueError("invalid raster or focal length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")
        if not self.point_spacing > 0:
            raise ValueError("point_spacing must be > 0")


def make_cameras(spec: SceneSpec) -> list[Camera]:
    tr = spec.trajectory
    target = np.asarray(tr.look_at, dtype=np.float64)
    n = tr.count
    angles = np.deg2rad(np.linspace(-tr.arc_degrees / 2, tr.arc_degrees / 2, n))
    cams = []
    for a in angles:
        eye = target + np.array([tr.radius * np.sin(a), tr.height, -tr.radius * np.cos(a)])
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), spec.focal, spec.focal, spec.width, spec.height))
    return cams


class _Texture:
    """Seeded value noise mixed with a checker pattern."""

    def __init__(self, rng: np.random.Generator, bg: BackgroundSpec):
        self.bg = bg
        self.lattice = rng.uniform(0.0, 1.0, size=(64, 64))
        self.palette = rng.uniform(0.15, 0.85, size=(3, 3))
        self.offset = rng.uniform(0, 8, size=2)
        self.obj_palette = rng.uniform(0.1, 0.9, size=(2, 3))
        self.obj_freq = rng.uniform(2.0, 4.0)

    def _noise(self, x, y):
        gx = x / self.bg.noise_cell + self.offset[0]
        gy = y / self.bg.noise_cell + self.offset[1]
        x0, y0 = np.floor(gx), np.floor(gy)
        fx, fy = gx - x0, gy - y0
        sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
        i0, j0 = x0.astype(np.int64) % 64, y0.astype(np.int64) % 64
        i1, j1 = (i0 + 1) % 64, (j0 + 1) % 64
        L = self.lattice
        a = L[i0, j0] * (1 - sx) + L[i1, j0] * sx
        b = L[i0, j1] * (1 - sx) + L[i1, j1] * sx
        return a * (1 - sy) + b * sy

    def wall(self, p):
        x, y = p[..., 0], p[..., 1]
        n = self._noise(x, y)
        per = self.bg.checker_period
        chk = (np.floor(x / per) + np.floor(y / per)) % 2
        s = (1 - self.bg.checker_mix) * n + self.bg.checker_mix * chk
        col = self.palette[0] + s[..., None] * (self.palette[1] - self.palette[0])
        return np.clip(col, 0.06, 0.94)

    def object(self, p, center):
        q = p - center
        r = np.linalg.norm(q, axis=-1, keepdims=True)
        n = q / np.maximum(r, 1e-12)
        s = 0.5 + 0.5 * np.sin(self.obj_freq * np.pi * (n[..., 1:2] + 0.3 * n[..., 0:1]))
        col = self.obj_palette[0] + s * (self.obj_palette[1] - self.obj_palette[0])
        return np.clip(col, 0.06, 0.94)


def intersect_sphere(o, d, center, radius):
    """First positive hit distance per ray (inf on miss)."""
    oc = o - center
    b = np.einsum("...i,...i->...", oc, d)
    c = np.einsum("...i,...i->...", oc, oc) - radius * radius
    disc = b * b - c
    out = np.full(disc.shape, np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    out[ok] = t[ok]
    return out


def intersect_box(o, d, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        lo = (center - half - o) * inv
        hi = (center + half - o) * inv
    tmin = np.nanmax(np.minimum(lo, hi), axis=-1)
    tmax = np.nanmin(np.maximum(lo, hi), axis=-1)
    hit = (tmax >= np.maximum(tmin, 0)) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


def intersect_wall(o, d, wall_z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (wall_z - o[..., 2]) / d[..., 2]
    return np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)


def intersect_object(spec: SceneSpec, o, d):
    ob = spec.object
    c = np.asarray(ob.center, dtype=np.float64)
    if ob.kind == "sphere":
        return intersect_sphere(o, d, c, ob.size)
    if ob.kind == "box":
        return intersect_box(o, d, c, ob.size)
    return np.full(np.broadcast_shapes(o.shape, d.shape)[:-1], np.inf)


def _voxel_dedup(points: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of the first point in each voxel, in input order."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


@dataclass
class SceneBundle:
    """Everything ``generate_scene`` produces.

    ``images``/``depths``/``masks`` are per camera. ``background_cloud`` is the
    full cloud minus object points (it has holes where the object occluded
    the wall in every view); ``complete_background`` is the wall sampled as if
    the object were absent and supplies the inpainting supervision
    ``background_images``/``background_depths``.
    """

    spec: SceneSpec
    cloud: NeuralPointCloud
    cameras: list
    images: list
    depths: list
    masks: list
    background_cloud: NeuralPointCloud
    object_indices: np.ndarray
    complete_background: NeuralPointCloud
    background_images: list
    background_depths: list
    decoder: object
    render_config: object


def _sample_surfaces(spec, cams, with_object: bool):
    """Analytic first hits of every pixel-center ray of every camera."""
    pts, labels = [], []
    wall_z = spec.background.wall_z
    for cam in cams:
        d = cam.pixel_directions().reshape(-1, 3)
        o = np.broadcast_to(cam.center, d.shape)
        tw = intersect_wall(o, d, wall_z)
        to = intersect_object(spec, o, d) if with_object else np.full(len(d), np.inf)
        t = np.minimum(tw, to)
        hit = np.isfinite(t) & (t > spec.t_near) & (t < spec.t_far)
        is_obj = to < tw
        pts.append(o[hit] + t[hit, None] * d[hit])
        labels.append(is_obj[hit])
    return np.concatenate(pts), np.concatenate(labels)


def _visible_from_any(spec, cams, points) -> np.ndarray:
    vis = np.zeros(len(points), dtype=bool)
    for cam in cams:
        seg = points - cam.center
        dist = np.linalg.norm(seg, axis=1)
        d = seg / dist[:, None]
        x = points @ cam.R.T + cam.t
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = (x @ cam.K.T)[:, :2] / x[:, 2:3]
        inside = (x[:, 2] > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        to = intersect_object(spec, np.broadcast_to(cam.center, d.shape), d)
        vis |= inside & ~(to < dist - 1e-6)
    return vis


def object_mask(spec: SceneSpec, cam: Camera) -> Mask2D:
    """Pixels whose center ray hits the object before the wall."""
    d = cam.pixel_directions()
    o = np.broadcast_to(cam.center, d.shape)
    to = intersect_object(spec, o, d)
    tw = intersect_wall(o, d, spec.background.wall_z)
    return Mask2D((to < tw) & np.isfinite(to))


def analytic_depth(spec: SceneSpec, cam: Camera, with_object: bool = True) -> DepthMap:
    """Exact camera z-depth of the first surface hit per pixel center."""
    d = cam.pixel_directions()
    o = np.broadcast_to(cam.center, d.shape)
    t = intersect_wall(o, d, spec.background.wall_z)
    if with_object:
        t = np.minimum(t, intersect_object(spec, o, d))
    t = np.where((t > spec.t_near) & (t < spec.t_far), t, np.inf)
    return DepthMap(np.where(np.isfinite(t), t * (d @ cam.optical_axis()), NO_DEPTH))


def generate_scene(spec: SceneSpec) -> SceneBundle:
    """Deterministically build a synthetic wall + object scene.

    Surface points come from unprojecting the analytic first-hit depth of
    every camera pixel (voxel-deduplicated at ``point_spacing``); features are
    solved so the fixed decoder reproduces the procedural color at density
    ``surface_density``. GT images are rendered by this package's renderer
    from those features; depth maps are the exact analytic first-hit depths
    (the renderer's expected termination depth sits up to one aggregation
    radius in front of the surface).
    """
    from .renderer import Decoder, RenderConfig, render_view

    spec.validate()
    rng = np.random.default_rng(spec.seed)
    tex = _Texture(rng, spec.background)
    decoder = Decoder.from_seed(spec.seed, spec.feature_dim)
    cams = make_cameras(spec)
    center = np.asarray(spec.object.center, dtype=np.float64)

    # complete wall (object absent)
    bg_pts, _ = _sample_surfaces(spec, cams, with_object=False)
    bg_pts = bg_pts[_voxel_dedup(bg_pts, spec.point_spacing)]
    if spec.object.kind != "none":
        obj_all, lab = _sample_surfaces(spec, cams, with_object=True)
        obj_pts = obj_all[lab]
        obj_pts = obj_pts[_voxel_dedup(obj_pts, spec.point_spacing)]
        if len(obj_pts) == 0:
            raise ValueError("degenerate spec: object is not visible from any camera")
        vis = _visible_from_any(spec, cams, bg_pts)
    else:
        obj_pts = np.zeros((0, 3))
        vis = np.ones(len(bg_pts), dtype=bool)

    def encode(points, colors):
        feats = decoder.encode(np.full(len(points), spec.surface_density), colors)
        return NeuralPointCloud(points, np.ones(len(points)), feats)

    complete_bg = encode(bg_pts, tex.wall(bg_pts))
    wall_visible = complete_bg.subset(np.flatnonzero(vis))
    obj_cloud = encode(obj_pts, tex.object(obj_pts, center)) if len(obj_pts) else NeuralPointCloud.empty(spec.feature_dim)
    cloud = wall_visible.concat(obj_cloud)
    object_indices = np.arange(len(wall_visible), len(cloud), dtype=np.int64)
    background_cloud = cloud.subset(np.arange(len(wall_visible)))

    rcfg = RenderConfig.for_cloud(complete_bg, t_near=spec.t_near, t_far=spec.t_far)
    images, depths, masks, bg_images, bg_depths = [], [], [], [], []
    for cam in cams:
        out = render_view(cloud, cam, rcfg, decoder)
        images.append(out.color)
        depths.append(analytic_depth(spec, cam))
        masks.append(object_mask(spec, cam))
        bout = render_view(complete_bg, cam, rcfg, decoder)
        bg_images.append(bout.color)
        bg_depths.append(analytic_depth(spec, cam, with_object=False))
    return SceneBundle(
        spec=spec,
        cloud=cloud,
        cameras=cams,
        images=images,
        depths=depths,
        masks=masks,
        background_cloud=background_cloud,
        object_indices=object_indices,
        complete_background=complete_bg,
        background_images=bg_images,
        background_depths=bg_depths,
        decoder=decoder,
        render_config=rcfg,
    )
