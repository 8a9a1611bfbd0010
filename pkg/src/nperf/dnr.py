"""Differentiable neural-point resampling (DNR).

Fills vacated and newly exposed regions of an edited cloud with points whose
features are aggregated from their K nearest unedited neighbours:

* ``ni``   -- plain average of the existing feature and the neighbours,
* ``kwa``  -- confidence-weighted average,
* ``gwfa`` -- Gaussian weighting by distance to the neighbourhood mean
  feature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import unproject_pixels
from .scene import Camera, DepthMap, Mask2D, Mask3D, NeuralPointCloud
from .spatial import PointIndex, median_spacing

STRATEGIES = ("none", "ni", "kwa", "gwfa")


@dataclass
class DnrConfig:
    strategy: str = "gwfa"
    k: int = 8
    sigma_floor: float = 1e-8

    def __post_init__(self):
        self.strategy = self.strategy.lower()
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be > 0")


# ----------------------------------------------------------------------
# aggregation rules; leading axes broadcast, neighbours on axis -2


def _neighbours(neighbors) -> np.ndarray:
    nb = np.asarray(neighbors, dtype=np.float64)
    if nb.ndim == 1:
        nb = nb[:, None]
    if nb.shape[-2] == 0:
        raise ValueError("need at least one neighbour (K >= 1)")
    return nb


def ni(f, neighbors) -> np.ndarray:
    """``(f + sum_k f_k) / (K + 1)``."""
    nb = _neighbours(neighbors)
    f = np.asarray(f, dtype=np.float64)
    K = nb.shape[-2]
    return (f + nb.sum(axis=-2)) / (K + 1)


def kwa(f, neighbors, confidences) -> np.ndarray:
    """``((1 - mean(omega)) f + sum_k omega_k f_k) / (K + 1)``; coefficients are
    deliberately not renormalised."""
    nb = _neighbours(neighbors)
    w = np.asarray(confidences, dtype=np.float64)
    if w.shape != nb.shape[:-1]:
        raise ValueError("one confidence per neighbour required")
    if np.any((w < 0) | (w > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    f = np.asarray(f, dtype=np.float64)
    K = nb.shape[-2]
    keep = 1.0 - w.mean(axis=-1)
    return (keep[..., None] * f + np.einsum("...k,...kf->...f", w, nb)) / (K + 1)


def gwfa_weights(neighbors, sigma_floor: float = 1e-8) -> np.ndarray:
    """Normalised Gaussian weights ``gamma_k / sum(gamma)``; uniform where the
    neighbourhood spread is below ``sigma_floor``."""
    nb = _neighbours(neighbors)
    K = nb.shape[-2]
    mu = nb.mean(axis=-2, keepdims=True)
    d2 = ((nb - mu) ** 2).sum(axis=-1)
    var = d2.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var)
    flat = sigma < sigma_floor
    safe_var = np.where(flat, 1.0, var)
    # the 1/(sqrt(2 pi) sigma) prefactor cancels in the normalisation
    logits = -d2 / (2.0 * safe_var)
    logits -= logits.max(axis=-1, keepdims=True)
    g = np.exp(logits)
    w = g / g.sum(axis=-1, keepdims=True)
    return np.where(flat, 1.0 / K, w)


def gwfa(neighbors, sigma_floor: float = 1e-8) -> np.ndarray:
    nb = _neighbours(neighbors)
    return np.einsum("...k,...kf->...f", gwfa_weights(nb, sigma_floor), nb)


# ----------------------------------------------------------------------
# placement


def inpaint_depth(depth: DepthMap, mask: Mask2D, k: int = 8) -> DepthMap:
    """Replace masked pixels by the inverse-distance-weighted mean depth of
    their ``k`` nearest unmasked, finite-depth pixels (image-space distance).
    Masked pixels stay empty when no source pixel exists."""
    if mask.raster.shape != depth.values.shape:
        raise ValueError("mask and depth rasters differ")
    vals = depth.values.copy()
    src = ~mask.raster & depth.valid
    if not mask.raster.any():
        return DepthMap(vals)
    mv, mu = np.nonzero(mask.raster)
    if not src.any():
        vals[mv, mu] = np.inf
        return DepthMap(vals)
    sv, su = np.nonzero(src)
    index = PointIndex(np.column_stack([su, sv, np.zeros(len(su))]).astype(np.float64))
    idx, dist = index.knn_batch(np.column_stack([mu, mv, np.zeros(len(mu))]).astype(np.float64), k)
    ok = idx >= 0
    w = np.where(ok, 1.0 / np.where(ok, dist, 1.0), 0.0)
    d = depth.values[sv[np.where(ok, idx, 0)], su[np.where(ok, idx, 0)]]
    vals[mv, mu] = (w * d).sum(axis=1) / w.sum(axis=1)
    return DepthMap(vals)


@dataclass
class ResamplePlan:
    """Targets to fill and, per target, its K nearest unedited neighbours.

    The first ``n_vacated`` targets are vacated positions; the rest come from
    depth inpainting. ``neighbors`` index into the edited cloud.
    """

    targets: np.ndarray  # (T, 3)
    n_vacated: int
    neighbors: np.ndarray  # (T, K)
    distances: np.ndarray  # (T, K)
    confidences: np.ndarray  # (T, K)

    def __len__(self) -> int:
        return len(self.targets)


def fill_positions(cloud_after_edit: NeuralPointCloud, depth_context, k_pixels: int = 8, voxel=None) -> np.ndarray:
    """3D positions behind each view's mask from inpainted depth, deduplicated
    on a voxel grid (default: half the median point spacing)."""
    pts = []
    for cam, dm, m in depth_context:
        if not m.raster.any():
            continue
        filled = inpaint_depth(dm, m, k_pixels)
        sel = m.raster & filled.valid
        v, u = np.nonzero(sel)
        pts.append(unproject_pixels(cam, u, v, filled.values[v, u]))
    if not pts:
        return np.zeros((0, 3))
    pts = np.concatenate(pts)
    if voxel is None:
        voxel = 0.5 * median_spacing(cloud_after_edit.positions)
    keys = np.floor(pts / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return pts[np.sort(first)]


def plan_resample(
    cloud_after_edit: NeuralPointCloud,
    vacated,
    depth_context: Sequence[tuple[Camera, DepthMap, Mask2D]],
    cfg: DnrConfig,
    exclude: Optional[Mask3D] = None,
) -> ResamplePlan:
    """Targets = vacated positions + depth-inpainted background positions,
    each paired with its K nearest points of the edited cloud outside
    ``exclude`` (the edited points themselves, for in-place edits)."""
    if len(cloud_after_edit) == 0:
        raise ValueError("nothing to aggregate from: edited cloud is empty")
    allowed = np.arange(len(cloud_after_edit))
    if exclude is not None and len(exclude):
        exclude.validate(len(cloud_after_edit))
        allowed = np.setdiff1d(allowed, exclude.indices)
    if len(allowed) == 0:
        raise ValueError("nothing to aggregate from: every point is masked")
    vacated = np.asarray(vacated, dtype=np.float64).reshape(-1, 3)
    fill = fill_positions(cloud_after_edit, depth_context) if depth_context else np.zeros((0, 3))
    targets = np.concatenate([vacated, fill])
    K = min(cfg.k, len(allowed))
    index = PointIndex(cloud_after_edit.positions[allowed])
    idx, dist = index.knn_batch(targets, K)
    nbr = allowed[idx] if len(targets) else idx
    conf = cloud_after_edit.confidences[nbr] if len(targets) else np.zeros((0, K))
    return ResamplePlan(targets, len(vacated), nbr, dist, conf)


def resample_features(cloud: NeuralPointCloud, plan: ResamplePlan, cfg: DnrConfig):
    """Features and confidences for every plan target under ``cfg.strategy``."""
    T, F = len(plan), cloud.feature_dim
    if T == 0:
        return np.zeros((0, F)), np.zeros(0)
    if cfg.strategy == "none":
        return np.zeros((T, F)), np.full(T, 0.5)
    nb = cloud.features[plan.neighbors]  # (T, K, F)
    conf = cloud.confidences[plan.neighbors]
    # targets have no feature of their own: the nearest neighbour stands in
    own = nb[:, 0, :]
    if cfg.strategy == "ni":
        feats = ni(own, nb)
    elif cfg.strategy == "kwa":
        feats = kwa(own, nb, conf)
    else:
        feats = gwfa(nb, cfg.sigma_floor)
    return feats, conf.mean(axis=1)


def apply_dnr(cloud: NeuralPointCloud, plan: ResamplePlan, cfg: DnrConfig) -> NeuralPointCloud:
    """Append one point per plan target; existing points are untouched."""
    if len(plan) == 0:
        return cloud
    if plan.neighbors.size and plan.neighbors.max() >= len(cloud):
        raise ValueError("plan refers to points outside the cloud")
    feats, conf = resample_features(cloud, plan, cfg)
    return cloud.concat(NeuralPointCloud(plan.targets, conf, feats))
