"""Discrete entropy and mutual-information diagnostics over rendered rays.

A ray becomes a distribution over its samples (normalised compositing
weights) with one quantised feature code per sample. Two rays are coupled by
pairing sample ``m`` with sample ``m`` (same stratification), which yields a
joint table over code pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .renderer import Decoder, RenderConfig, render_view
from .scene import Camera, Mask2D, NeuralPointCloud


@dataclass
class MiConfig:
    bins: int = 16
    max_pairs: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


@dataclass(frozen=True, eq=False)
class FeatureQuantizer:
    """Projection onto a fixed principal direction, then uniform bins over
    the reference range (values outside are clipped to the edge bins)."""

    mean: np.ndarray
    direction: np.ndarray
    lo: float
    hi: float
    bins: int

    @classmethod
    def fit(cls, features, bins: int = 16) -> "FeatureQuantizer":
        X = np.asarray(features, dtype=np.float64)
        mean = X.mean(axis=0)
        _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
        v = vt[0]
        # deterministic sign: largest-magnitude component positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        proj = (X - mean) @ v
        lo, hi = float(proj.min()), float(proj.max())
        if hi <= lo:
            hi = lo + 1.0
        return cls(mean, v, lo, hi, bins)

    def codes(self, features) -> np.ndarray:
        proj = (np.asarray(features, dtype=np.float64) - self.mean) @ self.direction
        b = np.floor((proj - self.lo) / (self.hi - self.lo) * self.bins).astype(np.int64)
        return np.clip(b, 0, self.bins - 1)


@dataclass(frozen=True, eq=False)
class RayDistribution:
    p: np.ndarray
    codes: np.ndarray
    bins: int

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        c = np.asarray(self.codes, dtype=np.int64)
        if p.shape != c.shape or p.ndim != 1:
            raise ValueError("p and codes must be 1D of equal length")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("p must be a probability vector")
        if np.any((c < 0) | (c >= self.bins)):
            raise ValueError("codes out of range")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "codes", c)


def normalise_weights(weights) -> np.ndarray:
    """Compositing weights -> per-ray probabilities (uniform for empty rays)."""
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum(axis=-1, keepdims=True)
    uniform = np.full_like(w, 1.0 / w.shape[-1])
    return np.where(s > 0, w / np.where(s > 0, s, 1.0), uniform)


def ray_distribution(weights, features, quantizer: FeatureQuantizer) -> RayDistribution:
    """From one ray's per-sample compositing weights (S,) and shaded
    features (S, F)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("need at least one sample")
    return RayDistribution(normalise_weights(w), quantizer.codes(features), quantizer.bins)


def entropy(d: RayDistribution) -> float:
    p = d.p[d.p > 0]
    return float(-(p * np.log(p)).sum())


def joint_table(di: RayDistribution, dj: RayDistribution) -> np.ndarray:
    """Unnormalised (B, B) mass: sample m of ray i paired with sample m of ray j."""
    if di.bins != dj.bins:
        raise ValueError("bin counts differ")
    if len(di.p) != len(dj.p):
        raise ValueError("rays must have the same number of samples")
    table = np.zeros((di.bins, dj.bins))
    np.add.at(table, (di.codes, dj.codes), di.p * dj.p)
    return table


def mi_from_table(table) -> float:
    t = np.asarray(table, dtype=np.float64)
    total = t.sum()
    if total <= 0:
        return 0.0
    P = t / total
    pa = P.sum(axis=1, keepdims=True)
    pb = P.sum(axis=0, keepdims=True)
    nz = P > 0
    # log differences: the product pa * pb can underflow for tiny masses
    la = np.log(np.broadcast_to(pa, P.shape)[nz])
    lb = np.log(np.broadcast_to(pb, P.shape)[nz])
    mi = float((P[nz] * (np.log(P[nz]) - la - lb)).sum())
    return max(mi, 0.0)


def marginal_entropies(table) -> tuple[float, float]:
    t = np.asarray(table, dtype=np.float64)
    P = t / t.sum()

    def H(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    return H(P.sum(axis=1)), H(P.sum(axis=0))


def mutual_information(di: RayDistribution, dj: RayDistribution) -> float:
    """MI (nats) of the index-aligned joint code distribution; 0 when the
    two rays share no sample mass."""
    return mi_from_table(joint_table(di, dj))


def _batched_tables(wi, fi, wj, fj, quantizer) -> np.ndarray:
    pi, pj = normalise_weights(wi), normalise_weights(wj)
    ci, cj = quantizer.codes(fi), quantizer.codes(fj)
    B = quantizer.bins
    table = np.zeros((B, B))
    np.add.at(table, (ci.ravel(), cj.ravel()), (pi * pj).ravel())
    return table


def _dense_records(out):
    w = np.concatenate([r.weights for r in out.records])
    f = np.concatenate([r.features for r in out.records])
    return w, f


def pair_pixels(mask_a: Optional[Mask2D], mask_b: Optional[Mask2D], shape, max_pairs: int, rng) -> np.ndarray:
    """Flat pixel ids used to pair two views: the union of both masks if any
    pixel is masked, otherwise the whole raster; subsampled without
    replacement and sorted."""
    sel = np.zeros(shape, dtype=bool)
    for m in (mask_a, mask_b):
        if m is not None:
            sel |= m.raster
    if not sel.any():
        sel[:] = True
    ids = np.flatnonzero(sel)
    if len(ids) > max_pairs:
        ids = np.sort(rng.choice(ids, size=max_pairs, replace=False))
    return ids


def scene_mi(
    cloud: NeuralPointCloud,
    cameras: Sequence[Camera],
    render_cfg: RenderConfig,
    decoder: Decoder,
    quantizer: FeatureQuantizer,
    cfg: MiConfig = MiConfig(),
    masks: Optional[Sequence[Mask2D]] = None,
) -> float:
    """Average over adjacent camera pairs of the MI of the pooled joint code
    table of corresponding (same-pixel) ray pairs."""
    if len(cameras) < 2:
        raise ValueError("scene_mi needs at least 2 cameras")
    rng = np.random.default_rng(cfg.seed)
    outs = [_dense_records(render_view(cloud, cam, render_cfg, decoder)) for cam in cameras]
    values = []
    for a in range(len(cameras) - 1):
        b = a + 1
        ids = pair_pixels(
            None if masks is None else masks[a],
            None if masks is None else masks[b],
            cameras[a].shape,
            cfg.max_pairs,
            rng,
        )
        wa, fa = outs[a]
        wb, fb = outs[b]
        table = _batched_tables(wa[ids], fa[ids], wb[ids], fb[ids], quantizer)
        values.append(mi_from_table(table))
    return float(np.mean(values))
