"""Point-based differentiable volume renderer.

Shading points along each ray aggregate the features of nearby neural points
(inverse distance x confidence weights), a fixed decoder maps the aggregated
feature to density (softplus) and color (sigmoid), and samples are alpha
composited front to back. ``backward`` reverses the whole chain analytically
and returns gradients for point features and confidences; positions are
treated as constants.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scene import NO_DEPTH, Camera, DepthMap, NeuralPointCloud, Ray
from .spatial import PointIndex, median_spacing

DELTA_MIN = 1e-6
EPS_W = 1e-6
TAU_CLAMP = 80.0


class StaleRecordsError(RuntimeError):
    """Forward records do not belong to the cloud passed to backward."""


def worker_count() -> int:
    raw = os.environ.get("NPERF_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class RenderConfig:
    samples_per_ray: int = 64
    r_agg: float = 0.2
    max_neighbors: int = 8
    background: tuple = (0.0, 0.0, 0.0)
    jitter: bool = False
    jitter_seed: int = 0
    t_near: float = 1.5
    t_far: float = 8.0
    chunk_rays: int = 1024

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not self.r_agg > 0:
            raise ValueError("r_agg must be > 0")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")

    @classmethod
    def for_cloud(cls, cloud: NeuralPointCloud, **kw) -> "RenderConfig":
        """Default aggregation radius: twice the median point spacing."""
        return cls(r_agg=2.0 * median_spacing(cloud.positions), **kw)


@dataclass(frozen=True, eq=False)
class Decoder:
    """Fixed affine maps feature -> (density pre-activation, color pre-activation)."""

    w_density: np.ndarray
    b_density: float
    w_color: np.ndarray
    b_color: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, feature_dim: int) -> "Decoder":
        rng = np.random.default_rng([int(seed), 0x5EED])
        F = feature_dim
        return cls(
            w_density=rng.normal(size=F) * 6.0 / np.sqrt(F),
            b_density=-1.0,
            w_color=rng.normal(size=(3, F)) * 2.0 / np.sqrt(F),
            b_color=np.zeros(3),
        )

    @property
    def feature_dim(self) -> int:
        return len(self.w_density)

    def decode(self, g):
        s = g @ self.w_density + self.b_density
        cp = g @ self.w_color.T + self.b_color
        return softplus(s), sigmoid(cp), s

    def encode(self, density, colors) -> np.ndarray:
        """Minimum-norm features reproducing the given density and color."""
        A = np.vstack([self.w_density, self.w_color])
        rhs = np.column_stack([softplus_inv(density) - self.b_density, logit(colors) - self.b_color])
        return rhs @ np.linalg.pinv(A).T

    def to_dict(self) -> dict:
        return {
            "w_density": self.w_density.tolist(),
            "b_density": float(self.b_density),
            "w_color": self.w_color.tolist(),
            "b_color": self.b_color.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Decoder":
        return cls(np.array(d["w_density"]), float(d["b_density"]), np.array(d["w_color"]), np.array(d["b_color"]))


# ----------------------------------------------------------------------
# batched core


@dataclass
class RayGeometry:
    """Sample positions and shading neighbourhoods for a bundle of rays.

    Only samples with at least one neighbour are stored in the compact arrays
    (``sample_ray``/``sample_slot`` locate them in the dense ``(R, S)`` grid).
    Depends on point positions only, so it can be reused while features and
    confidences change.
    """

    ts: np.ndarray  # (R, S)
    deltas: np.ndarray  # (R, S)
    depth_scale: np.ndarray  # (R,)
    sample_ray: np.ndarray  # (P,)
    sample_slot: np.ndarray  # (P,)
    nbr: np.ndarray  # (P, k) point indices, -1 padded
    rho: np.ndarray  # (P, k) 1 / max(dist, DELTA_MIN), 0 where padded
    geometry_revision: str

    @property
    def n_rays(self) -> int:
        return self.ts.shape[0]

    def take(self, rays) -> "RayGeometry":
        """Sub-bundle for the given ray indices (order preserved)."""
        rays = np.asarray(rays, dtype=np.int64)
        remap = np.full(self.n_rays, -1, dtype=np.int64)
        remap[rays] = np.arange(len(rays))
        keep = remap[self.sample_ray] >= 0
        new_ray = remap[self.sample_ray[keep]]
        order = np.lexsort((self.sample_slot[keep], new_ray))
        return RayGeometry(
            ts=self.ts[rays],
            deltas=self.deltas[rays],
            depth_scale=self.depth_scale[rays],
            sample_ray=new_ray[order],
            sample_slot=self.sample_slot[keep][order],
            nbr=self.nbr[keep][order],
            rho=self.rho[keep][order],
            geometry_revision=self.geometry_revision,
        )


def sample_distances(n_rays: int, cfg: RenderConfig, t_near=None, t_far=None, jitter=None):
    """Stratified sample distances and interval lengths, each ``(R, S)``.

    With jitter off, samples sit at stratum midpoints. ``delta`` is the gap to
    the next sample; the last sample gets one stratum width.
    """
    S = cfg.samples_per_ray
    tn = cfg.t_near if t_near is None else t_near
    tf = cfg.t_far if t_far is None else t_far
    width = (tf - tn) / S
    offs = np.full((n_rays, S), 0.5) if jitter is None else jitter
    ts = tn + (np.arange(S)[None, :] + offs) * width
    deltas = np.empty_like(ts)
    deltas[:, :-1] = np.diff(ts, axis=1)
    deltas[:, -1] = width
    return ts, deltas


def prepare_rays(cloud, index: PointIndex, origins, directions, cfg: RenderConfig, depth_scale=None, jitter=None):
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    R = len(directions)
    ts, deltas = sample_distances(R, cfg, jitter=jitter)
    xs = origins[:, None, :] + ts[..., None] * directions[:, None, :]
    nbr, dist = index.knn_batch(xs.reshape(-1, 3), cfg.max_neighbors, max_distance=cfg.r_agg)
    has = nbr[:, 0] >= 0
    flat = np.flatnonzero(has)
    nbr = nbr[flat]
    dist = dist[flat]
    rho = np.where(nbr >= 0, 1.0 / np.maximum(dist, DELTA_MIN), 0.0)
    S = cfg.samples_per_ray
    return RayGeometry(
        ts=ts,
        deltas=deltas,
        depth_scale=np.ones(R) if depth_scale is None else np.asarray(depth_scale, dtype=np.float64),
        sample_ray=flat // S,
        sample_slot=flat % S,
        nbr=nbr,
        rho=rho,
        geometry_revision=cloud.geometry_revision(),
    )


@dataclass
class ForwardRecords:
    """Per-sample intermediates of one forward pass (dense ``(R, S, ...)``)."""

    geometry: RayGeometry
    cloud_revision: str
    wsum_pts: np.ndarray  # (P,) sum of shading weights
    g: np.ndarray  # (P, F) aggregated features
    s: np.ndarray  # (P,) density pre-activation
    sigma: np.ndarray  # (R, S)
    tau: np.ndarray  # (R, S) unclamped sigma * delta
    alpha: np.ndarray  # (R, S)
    T: np.ndarray  # (R, S) transmittance before each sample
    weights: np.ndarray  # (R, S)
    colors: np.ndarray  # (R, S, 3)
    features: np.ndarray  # (R, S, F) shaded feature per sample, 0 in vacuum
    vacuum: np.ndarray  # (R, S) bool
    color: np.ndarray  # (R, 3)
    depth_ray: np.ndarray  # (R,)
    weight_sum: np.ndarray  # (R,)
    background: np.ndarray  # (3,)


def composite(sigma, colors, ts, deltas, background):
    """Front-to-back quadrature over the last axis of ``sigma``.

    Returns ``(color, depth, weight_sum, weights, T, alpha, tau)`` where depth
    is the weight-normalised mean sample distance.
    """
    tau = sigma * deltas
    tau_c = np.minimum(tau, TAU_CLAMP)
    alpha = -np.expm1(-tau_c)
    cum = np.cumsum(tau_c, axis=-1)
    T = np.exp(-(cum - tau_c))
    w = T * alpha
    # sum of T*alpha telescopes to 1 - T_end; the closed form is monotone in tau under rounding
    A = -np.expm1(-cum[..., -1]) if cum.shape[-1] else np.zeros(cum.shape[:-1])
    color = np.einsum("...s,...sc->...c", w, colors) + (1.0 - A)[..., None] * np.asarray(background)
    depth = (w * ts).sum(axis=-1) / np.maximum(A, EPS_W)
    return color, depth, A, w, T, alpha, tau


def forward(geom: RayGeometry, cloud: NeuralPointCloud, decoder: Decoder, cfg: RenderConfig) -> ForwardRecords:
    if geom.geometry_revision != cloud.geometry_revision():
        raise StaleRecordsError("ray geometry was built for different point positions")
    R, S = geom.ts.shape
    F = cloud.feature_dim
    nb = np.where(geom.nbr >= 0, geom.nbr, 0)
    w = cloud.confidences[nb] * geom.rho
    W = w.sum(axis=1)
    live = W > 0
    safeW = np.where(live, W, 1.0)
    g = np.einsum("pk,pkf->pf", w, cloud.features[nb]) / safeW[:, None]
    g[~live] = 0.0
    sig_p, col_p, s = decoder.decode(g)
    sig_p = np.where(live, sig_p, 0.0)

    sigma = np.zeros((R, S))
    colors = np.zeros((R, S, 3))
    feats = np.zeros((R, S, F))
    vacuum = np.ones((R, S), dtype=bool)
    sigma[geom.sample_ray, geom.sample_slot] = sig_p
    colors[geom.sample_ray, geom.sample_slot] = col_p
    feats[geom.sample_ray, geom.sample_slot] = g
    vacuum[geom.sample_ray, geom.sample_slot] = ~live
    # vacuum samples still need a color for bookkeeping; weight is zero there
    colors[vacuum] = sigmoid(decoder.b_color)

    bg = np.asarray(cfg.background, dtype=np.float64)
    color, depth, A, wts, T, alpha, tau = composite(sigma, colors, geom.ts, geom.deltas, bg)
    return ForwardRecords(
        geometry=geom,
        cloud_revision=cloud.revision(),
        wsum_pts=W,
        g=g,
        s=s,
        sigma=sigma,
        tau=tau,
        alpha=alpha,
        T=T,
        weights=wts,
        colors=colors,
        features=feats,
        vacuum=vacuum,
        color=color,
        depth_ray=depth,
        weight_sum=A,
        background=bg,
    )


def backward_records(rec: ForwardRecords, cloud: NeuralPointCloud, decoder: Decoder, grad_color, grad_depth):
    """Reverse-mode pass for one bundle.

    ``grad_color`` is dL/d(color) with shape (R, 3); ``grad_depth`` is dL/d(z-depth)
    with shape (R,) (the z-depth is ``depth_ray * depth_scale``). Returns
    ``(dL/dfeatures (N, F), dL/dconfidences (N,))``.
    """
    if rec.cloud_revision != cloud.revision():
        raise StaleRecordsError("forward records are stale for this cloud")
    geom = rec.geometry
    N, F = len(cloud), cloud.feature_dim
    gC = np.asarray(grad_color, dtype=np.float64).reshape(-1, 3)
    gD = np.asarray(grad_depth, dtype=np.float64).reshape(-1) * geom.depth_scale

    w, T, tau, ts = rec.weights, rec.T, rec.tau, geom.ts
    tau_c = np.minimum(tau, TAU_CLAMP)
    T_next = T * np.exp(-tau_c)
    A = rec.weight_sum
    T_end = 1.0 - A

    # color: dC/dtau_n = T_{n+1} c_n - (C - C_{<=n})
    wc = w[..., None] * rec.colors
    suffix_c = rec.color[:, None, :] - np.cumsum(wc, axis=1)
    dC_dtau = T_next[..., None] * rec.colors - suffix_c
    dL_dtau = np.einsum("rsc,rc->rs", dC_dtau, gC)

    # depth: D = N / max(A, eps)
    wt = w * ts
    Nn = wt.sum(axis=1)
    dN = T_next * ts - (Nn[:, None] - np.cumsum(wt, axis=1))
    big = A > EPS_W
    denom = np.where(big, A, EPS_W)
    D = Nn / denom
    dD = np.where(big[:, None], (dN - D[:, None] * T_end[:, None]) / denom[:, None], dN / EPS_W)
    dL_dtau += dD * gD[:, None]

    dL_dc = w[..., None] * gC[:, None, :]

    # to compact samples
    pr, ps = geom.sample_ray, geom.sample_slot
    live = rec.wsum_pts > 0
    unclamped = tau[pr, ps] < TAU_CLAMP
    dL_dsigma = dL_dtau[pr, ps] * geom.deltas[pr, ps] * unclamped
    dL_ds = dL_dsigma * sigmoid(rec.s) * live
    c = rec.colors[pr, ps]
    dL_dcp = dL_dc[pr, ps] * c * (1.0 - c) * live[:, None]
    dL_dg = dL_ds[:, None] * decoder.w_density[None, :] + dL_dcp @ decoder.w_color

    nb = np.where(geom.nbr >= 0, geom.nbr, 0)
    valid = geom.nbr >= 0
    conf = cloud.confidences[nb]
    Wsafe = np.where(live, rec.wsum_pts, 1.0)
    coef_f = conf * geom.rho / Wsafe[:, None] * valid  # dg/df_k scalar
    fk = cloud.features[nb]
    coef_w = np.einsum("pf,pkf->pk", dL_dg, fk - rec.g[:, None, :]) * geom.rho / Wsafe[:, None] * valid

    flat = nb.reshape(-1)
    grad_f = np.empty((N, F))
    contrib = coef_f[..., None] * dL_dg[:, None, :]
    for j in range(F):
        grad_f[:, j] = np.bincount(flat, weights=contrib[..., j].reshape(-1), minlength=N)
    grad_w = np.bincount(flat, weights=coef_w.reshape(-1), minlength=N)
    return grad_f, grad_w


# ----------------------------------------------------------------------
# public single-item API


def shade_point(cloud: NeuralPointCloud, index: PointIndex, x, cfg: RenderConfig):
    """Aggregated feature at ``x``.

    Returns ``(feature, neighbours, weights, vacuum)``; ``neighbours`` are
    point indices and ``weights`` the unnormalised ``omega / max(d, DELTA_MIN)``.
    """
    hits = index.radius_query(x, cfg.r_agg)[: cfg.max_neighbors]
    if not hits:
        return np.zeros(cloud.feature_dim), [], np.zeros(0), True
    ids = np.array([i for i, _ in hits])
    d = np.array([dd for _, dd in hits])
    w = cloud.confidences[ids] / np.maximum(d, DELTA_MIN)
    if w.sum() <= 0:
        return np.zeros(cloud.feature_dim), ids.tolist(), w, True
    f = (w[:, None] * cloud.features[ids]).sum(axis=0) / w.sum()
    return f, ids.tolist(), w, False


@dataclass
class RayResult:
    color: np.ndarray
    depth: float
    weight_sum: float
    records: ForwardRecords


def render_ray(cloud, index: PointIndex, ray: Ray, cfg: RenderConfig, decoder: Decoder) -> RayResult:
    cfg_r = RenderConfig(**{**cfg.__dict__, "t_near": ray.t_near, "t_far": ray.t_far})
    geom = prepare_rays(cloud, index, ray.origin[None], ray.direction[None], cfg_r)
    rec = forward(geom, cloud, decoder, cfg_r)
    return RayResult(rec.color[0], float(rec.depth_ray[0]), float(rec.weight_sum[0]), rec)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) camera z-depth
    weight_sum: np.ndarray  # (H, W)
    records: list = field(default_factory=list, repr=False)
    grad_features: Optional[np.ndarray] = None
    grad_confidences: Optional[np.ndarray] = None

    def depth_map(self) -> DepthMap:
        return DepthMap(np.where(self.weight_sum > EPS_W, self.depth, NO_DEPTH))


def camera_geometry(cloud, cam: Camera, cfg: RenderConfig, index: Optional[PointIndex] = None) -> RayGeometry:
    """Ray geometry for every pixel of ``cam`` (row-major)."""
    index = PointIndex(cloud.positions) if index is None else index
    dirs = cam.pixel_directions().reshape(-1, 3)
    origins = np.broadcast_to(cam.center, dirs.shape)
    jitter = None
    if cfg.jitter:
        rng = np.random.default_rng(cfg.jitter_seed)
        jitter = rng.uniform(size=(len(dirs), cfg.samples_per_ray))
    chunks = _chunks(len(dirs), cfg.chunk_rays)
    scale = dirs @ cam.optical_axis()

    def job(sl):
        return prepare_rays(cloud, index, origins[sl], dirs[sl], cfg, depth_scale=scale[sl],
                            jitter=None if jitter is None else jitter[sl])

    parts = _map(job, chunks)
    return _merge_geometry(parts, cfg.samples_per_ray)


def _chunks(n, size):
    return [slice(i, min(n, i + size)) for i in range(0, n, size)] or [slice(0, 0)]


def _map(fn, items):
    threads = worker_count()
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _merge_geometry(parts, S) -> RayGeometry:
    offs = np.cumsum([0] + [p.n_rays for p in parts])
    return RayGeometry(
        ts=np.concatenate([p.ts for p in parts]),
        deltas=np.concatenate([p.deltas for p in parts]),
        depth_scale=np.concatenate([p.depth_scale for p in parts]),
        sample_ray=np.concatenate([p.sample_ray + o for p, o in zip(parts, offs)]),
        sample_slot=np.concatenate([p.sample_slot for p in parts]),
        nbr=np.concatenate([p.nbr for p in parts]),
        rho=np.concatenate([p.rho for p in parts]),
        geometry_revision=parts[0].geometry_revision,
    )


def render_view(cloud, cam: Camera, cfg: RenderConfig, decoder: Decoder,
                index: Optional[PointIndex] = None, geometry: Optional[RayGeometry] = None) -> RenderOutput:
    """Render every pixel of ``cam``; records for ``backward`` are attached.

    Work is split into fixed-size ray chunks; ``NPERF_THREADS`` only changes
    how many chunks run at once, never the arithmetic.
    """
    H, W = cam.height, cam.width
    if len(cloud) == 0:
        bg = np.broadcast_to(np.asarray(cfg.background, dtype=np.float64), (H, W, 3)).copy()
        return RenderOutput(bg, np.zeros((H, W)), np.zeros((H, W)), [])
    geom = camera_geometry(cloud, cam, cfg, index) if geometry is None else geometry
    chunks = _chunks(geom.n_rays, cfg.chunk_rays)
    parts = _map(lambda sl: forward(geom.take(np.arange(sl.start, sl.stop)), cloud, decoder, cfg), chunks)
    color = np.concatenate([p.color for p in parts]).reshape(H, W, 3)
    depth = np.concatenate([p.depth_ray * p.geometry.depth_scale for p in parts]).reshape(H, W)
    A = np.concatenate([p.weight_sum for p in parts]).reshape(H, W)
    return RenderOutput(color, depth, A, parts)


def backward(cloud, cam: Camera, cfg: RenderConfig, decoder: Decoder, grad_color, grad_depth, records):
    """Gradients of a scalar loss w.r.t. point features and confidences.

    ``records`` is the ``records`` list of a :class:`RenderOutput` (or the
    output itself). Per-chunk buffers are summed in chunk order, so the
    result does not depend on ``NPERF_THREADS``.
    """
    if isinstance(records, RenderOutput):
        records = records.records
    N, F = len(cloud), cloud.feature_dim
    if not records:
        return np.zeros((N, F)), np.zeros(N)
    gC = np.asarray(grad_color, dtype=np.float64).reshape(-1, 3)
    gD = np.asarray(grad_depth, dtype=np.float64).reshape(-1)
    offs = np.cumsum([0] + [r.geometry.n_rays for r in records])
    if offs[-1] != len(gC) or offs[-1] != cam.width * cam.height:
        raise ValueError("gradient raster does not match the rendered view")

    def job(i):
        sl = slice(offs[i], offs[i + 1])
        return backward_records(records[i], cloud, decoder, gC[sl], gD[sl])

    parts = _map(job, list(range(len(records))))
    gf = np.zeros((N, F))
    gw = np.zeros(N)
    for a, b in parts:
        gf += a
        gw += b
    return gf, gw
