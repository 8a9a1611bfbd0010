"""Per-scene fine-tuning of point features and confidences.

Loss = color + lambda_per * patch-statistics proxy + lambda_depth * depth
+ alpha_sparse * confidence binary entropy. Positions and decoder stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .renderer import (
    Decoder,
    RenderConfig,
    backward_records,
    camera_geometry,
    forward,
)
from .scene import Camera, DepthMap, Mask2D, NeuralPointCloud
from .spatial import PointIndex

CONF_EPS = 1e-6
PATCH = 8
SCALES = 3


class NumericalError(RuntimeError):
    def __init__(self, message, step=None, components=None):
        super().__init__(message)
        self.step = step
        self.components = components or {}


@dataclass
class LossWeights:
    per: float = 1e-2
    depth: float = 1e-3
    sparse: float = 1e-4

    def __post_init__(self):
        if min(self.per, self.depth, self.sparse) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rays_per_step: int = 1024
    max_steps: int = 2000
    window: int = 100
    threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.max_steps < 0 or (0 < self.max_steps < self.window):
            raise ValueError("max_steps must be 0 or >= window")


@dataclass
class Supervision:
    """Per-camera targets. For removal, masked pixels already hold the
    background ground truth (see :meth:`for_removal`)."""

    cameras: list
    images: list
    depths: list
    masks: list

    @classmethod
    def for_removal(cls, cameras, images, depths, masks, bg_images, bg_depths) -> "Supervision":
        imgs, dps = [], []
        for img, d, m, bi, bd in zip(images, depths, masks, bg_images, bg_depths):
            imgs.append(np.where(m.raster[..., None], bi, img))
            dps.append(DepthMap(np.where(m.raster, bd.values, d.values)))
        return cls(list(cameras), imgs, dps, list(masks))


# ----------------------------------------------------------------------
# loss terms (value, gradient)


def _pool_ids(h, w):
    v, u = np.mgrid[0:h, 0:w]
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    return ((v // 2) * w2 + (u // 2)).ravel(), h2, w2


def _pool(x, ids, n, counts):
    """2x2 average pooling (partial edge cells averaged over what exists)."""
    flat = x.reshape(len(ids), -1)
    out = np.stack([np.bincount(ids, weights=flat[:, c], minlength=n) for c in range(flat.shape[1])], axis=1)
    return out / counts[:, None]


def _patch_term(x, t, m):
    """Masked 8x8 patch mean/variance mismatch at one scale -> (value, dL/dx)."""
    h, w, C = x.shape
    v, u = np.mgrid[0:h, 0:w]
    pw = (w + PATCH - 1) // PATCH
    pid = ((v // PATCH) * pw + (u // PATCH)).ravel()
    npatch = pid.max() + 1
    mm = m.ravel()
    M = np.bincount(pid, weights=mm, minlength=npatch)
    live = M > 0
    if not live.any():
        return 0.0, np.zeros_like(x), False
    Ms = np.where(live, M, 1.0)
    xf, tf = x.reshape(-1, C), t.reshape(-1, C)

    def stats(a):
        mu = np.stack([np.bincount(pid, weights=mm * a[:, c], minlength=npatch) for c in range(C)], 1) / Ms[:, None]
        dev = a - mu[pid]
        var = np.stack([np.bincount(pid, weights=mm * dev[:, c] ** 2, minlength=npatch) for c in range(C)], 1) / Ms[:, None]
        return mu, var, dev

    mx, vx, dx = stats(xf)
    mt, vt, _ = stats(tf)
    dm, dv = (mx - mt)[live], (vx - vt)[live]
    norm = live.sum() * C
    value = float(((dm ** 2).sum() + (dv ** 2).sum()) / norm)
    gm = np.where(live[:, None], 2 * (mx - mt), 0.0) / norm
    gv = np.where(live[:, None], 2 * (vx - vt), 0.0) / norm
    grad = (mm[:, None] / Ms[pid][:, None]) * (gm[pid] + 2 * gv[pid] * dx)
    return value, grad.reshape(x.shape), True


def perceptual_proxy(pred, target, mask):
    """Mean over 3 dyadic scales of masked 8x8 patch (mean, variance)
    squared differences. Returns ``(value, dL/dpred)``."""
    x, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    levels = []
    grads_back = []
    values = []
    for s in range(SCALES):
        val, g, used = _patch_term(x, t, m)
        levels.append((g, used))
        values.append(val if used else None)
        if s == SCALES - 1 or min(x.shape[:2]) < 2:
            break
        h, w = x.shape[:2]
        ids, h2, w2 = _pool_ids(h, w)
        counts = np.bincount(ids, minlength=h2 * w2).astype(np.float64)
        grads_back.append((ids, counts, (h, w)))
        x = _pool(x, ids, h2 * w2, counts).reshape(h2, w2, -1)
        t = _pool(t, ids, h2 * w2, counts).reshape(h2, w2, -1)
        m = _pool(m[..., None], ids, h2 * w2, counts).reshape(h2, w2)
    used = [v for v in values if v is not None]
    if not used:
        return 0.0, np.zeros_like(np.asarray(pred, dtype=np.float64))
    nscale = len(used)
    value = sum(used) / nscale
    # pull coarse gradients back to full resolution, coarsest first
    g = levels[-1][0] / nscale if levels[-1][1] else np.zeros_like(levels[-1][0])
    for lvl in range(len(levels) - 2, -1, -1):
        ids, counts, (h, w) = grads_back[lvl]
        up = (g.reshape(-1, g.shape[-1])[ids] / counts[ids][:, None]).reshape(h, w, -1)
        own = levels[lvl][0] / nscale if levels[lvl][1] else 0.0
        g = up + own
    return value, g


def binary_entropy(conf):
    w = np.clip(np.asarray(conf, dtype=np.float64), CONF_EPS, 1 - CONF_EPS)
    return -w * np.log(w) - (1 - w) * np.log(1 - w)


@dataclass
class LossResult:
    total: float
    components: dict
    grad_color: np.ndarray
    grad_depth: np.ndarray
    grad_confidences: np.ndarray


def loss(pred, gt_image, gt_depth, mask, cloud: NeuralPointCloud, w: LossWeights) -> LossResult:
    """Weighted loss for one rendered view (or crop).

    ``pred`` needs ``.color`` (H, W, 3) and ``.depth`` (H, W); ``gt_depth`` is a
    DepthMap or array (non-finite entries are ignored); ``mask`` a Mask2D or
    boolean raster selecting the inpainting region for the perceptual proxy.
    """
    color = np.asarray(pred.color, dtype=np.float64)
    depth = np.asarray(pred.depth, dtype=np.float64)
    gt_image = np.asarray(gt_image, dtype=np.float64)
    gd = gt_depth.values if isinstance(gt_depth, DepthMap) else np.asarray(gt_depth, dtype=np.float64)
    m = mask.raster if isinstance(mask, Mask2D) else np.asarray(mask, dtype=bool)
    if color.shape != gt_image.shape or depth.shape != gd.shape or m.shape != depth.shape or color.shape[:2] != depth.shape:
        raise ValueError("prediction, targets and mask must share one raster shape")

    diff = color - gt_image
    l_color = float(np.mean(diff ** 2))
    g_color = 2 * diff / diff.size

    l_per, g_per = perceptual_proxy(color, gt_image, m)

    valid = np.isfinite(gd)
    nd = max(int(valid.sum()), 1)
    ddiff = np.where(valid, depth - np.where(valid, gd, 0.0), 0.0)
    l_depth = float((ddiff ** 2).sum() / nd) if valid.any() else 0.0
    g_depth = 2 * ddiff / nd

    conf = cloud.confidences
    if len(conf):
        l_sparse = float(binary_entropy(conf).mean())
        inside = (conf > CONF_EPS) & (conf < 1 - CONF_EPS)
        cc = np.clip(conf, CONF_EPS, 1 - CONF_EPS)
        g_sparse = np.where(inside, np.log((1 - cc) / cc), 0.0) / len(conf)
    else:
        l_sparse, g_sparse = 0.0, np.zeros(0)

    comps = {"color": l_color, "per": l_per, "depth": l_depth, "sparse": l_sparse}
    total = l_color + w.per * l_per + w.depth * l_depth + w.sparse * l_sparse
    return LossResult(
        total=float(total),
        components=comps,
        grad_color=g_color + w.per * g_per,
        grad_depth=w.depth * g_depth,
        grad_confidences=w.sparse * g_sparse,
    )


# ----------------------------------------------------------------------
# convergence


def convergence_step(trace: Sequence[float], window: int = 100, threshold: float = 1e-3, settle: float = 0.05) -> int:
    """First step ``s`` whose trailing ``window``-step mean differs from the
    previous step's by a relative amount below ``threshold`` and stays within
    ``settle`` (relative) of the final trailing mean from then on. Returns
    ``len(trace)`` if no such step exists."""
    x = np.asarray(trace, dtype=np.float64)
    n = len(x)
    if n < window:
        raise ValueError(f"trace of length {n} shorter than window {window}")
    c = np.concatenate([[0.0], np.cumsum(x)])
    ma = (c[window:] - c[:-window]) / window  # ma[i] ends at step i + window - 1
    steps = np.arange(window - 1, n)
    final = ma[-1]
    dev = np.abs(ma - final)
    # worst deviation from the current step onward
    tail = np.maximum.accumulate(dev[::-1])[::-1]
    prev = ma[:-1]
    rel = np.abs(ma[1:] - prev) / np.maximum(np.abs(prev), 1e-300)
    ok = (rel < threshold) & (tail[1:] <= settle * abs(final))
    hits = np.flatnonzero(ok)
    return int(steps[1:][hits[0]]) if len(hits) else n


# ----------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, shape_f, shape_w, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros(shape_f), np.zeros(shape_w)]
        self.v = [np.zeros(shape_f), np.zeros(shape_w)]

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mh = self.m[i] / (1 - c.beta1 ** self.t)
            vh = self.v[i] / (1 - c.beta2 ** self.t)
            out.append(p - c.lr * mh / (np.sqrt(vh) + c.eps))
        return out


@dataclass
class FinetuneResult:
    cloud: NeuralPointCloud
    trace: list = field(default_factory=list)  # dicts: step, total, color, per, depth, sparse
    convergence_step: int = 0

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.trace])


class _CropView:
    def __init__(self, color, depth):
        self.color = color
        self.depth = depth


def finetune(
    cloud: NeuralPointCloud,
    supervision: Supervision,
    render_cfg: RenderConfig,
    decoder: Decoder,
    cfg: TrainConfig = TrainConfig(),
    w: LossWeights = LossWeights(),
    callback=None,
) -> FinetuneResult:
    """Adam on features and confidences; one camera per step in fixed cyclic
    order, on a seeded square crop of ``rays_per_step`` pixels (the whole view
    when it fits)."""
    if cfg.max_steps == 0:
        return FinetuneResult(cloud, [], 0)
    index = PointIndex(cloud.positions)
    geoms = [camera_geometry(cloud, cam, render_cfg, index) for cam in supervision.cameras]
    rng = np.random.default_rng(cfg.seed)
    feats = cloud.features.copy()
    conf = cloud.confidences.copy()
    opt = Adam(feats.shape, conf.shape, cfg)
    trace = []
    cur = cloud
    C = len(supervision.cameras)
    for step in range(cfg.max_steps):
        ci = step % C
        cam = supervision.cameras[ci]
        H, W = cam.height, cam.width
        rows, cols = _crop(H, W, cfg.rays_per_step, rng)
        pix = (rows[:, None] * W + cols[None, :]).ravel()
        geom = geoms[ci].take(pix)
        rec = forward(geom, cur, decoder, render_cfg)
        shape = (len(rows), len(cols))
        pred = _CropView(rec.color.reshape(*shape, 3), (rec.depth_ray * geom.depth_scale).reshape(shape))
        sup_img = supervision.images[ci][rows[:, None], cols[None, :]]
        sup_d = supervision.depths[ci].values[rows[:, None], cols[None, :]]
        sup_m = supervision.masks[ci].raster[rows[:, None], cols[None, :]]
        res = loss(pred, sup_img, sup_d, sup_m, cur, w)
        row = {"step": step, "total": res.total, **res.components}
        if not np.isfinite(res.total):
            raise NumericalError(f"non-finite loss at step {step}: {res.components}", step, res.components)
        trace.append(row)
        gf, gw = backward_records(rec, cur, decoder, res.grad_color.reshape(-1, 3), res.grad_depth.reshape(-1))
        gw = gw + res.grad_confidences
        if not (np.all(np.isfinite(gf)) and np.all(np.isfinite(gw))):
            raise NumericalError(f"non-finite gradient at step {step}: {res.components}", step, res.components)
        feats, conf = opt.step([feats, conf], [gf, gw])
        if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(conf))):
            raise NumericalError(f"non-finite parameters after step {step}: {res.components}", step, res.components)
        conf = np.clip(conf, 0.0, 1.0)
        cur = cur.replace(features=feats, confidences=conf)
        if callback is not None:
            callback(step, row)
    cs = convergence_step([r["total"] for r in trace], cfg.window, cfg.threshold)
    return FinetuneResult(cur, trace, cs)


def _crop(H, W, rays, rng):
    if rays >= H * W:
        return np.arange(H), np.arange(W)
    side = max(1, int(np.sqrt(rays)))
    sh, sw = min(side, H), min(side, W)
    r0 = int(rng.integers(0, H - sh + 1))
    c0 = int(rng.integers(0, W - sw + 1))
    return np.arange(r0, r0 + sh), np.arange(c0, c0 + sw)
