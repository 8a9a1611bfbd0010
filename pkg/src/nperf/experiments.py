"""Removal-scene experiments shared by the acceptance suite and scripts/."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dnr import DnrConfig, apply_dnr, plan_resample
from .geometry import edit_masked_points, segment
from .infotheory import FeatureQuantizer, MiConfig, scene_mi
from .metrics import psnr
from .renderer import render_view
from .scene import ObjectSpec, SceneSpec, generate_scene
from .train import LossWeights, Supervision, TrainConfig, finetune

# three seeded removal scenes; object kind and size vary with the seed
ACCEPTANCE_SCENES = (
    SceneSpec(seed=0, object=ObjectSpec(kind="sphere", size=0.85)),
    SceneSpec(seed=1, object=ObjectSpec(kind="box", size=0.7)),
    SceneSpec(seed=2, object=ObjectSpec(kind="sphere", size=0.85)),
)
# fine-tuning budget for the paired none/gwfa runs (desk-scale cap)
ACCEPTANCE_STEPS = 3000


@dataclass
class RemovalScene:
    bundle: object
    mask3d: object
    edited: object
    vacated: np.ndarray
    supervision: Supervision

    @property
    def depth_context(self):
        b = self.bundle
        return list(zip(b.cameras, b.depths, b.masks))

    def resampled(self, strategy: str, k: int = 8):
        cfg = DnrConfig(strategy=strategy, k=k)
        return apply_dnr(self.edited, plan_resample(self.edited, self.vacated, self.depth_context, cfg), cfg)


def removal_scene(spec: SceneSpec) -> RemovalScene:
    b = generate_scene(spec)
    m3, _ = segment(b.cameras, b.depths, b.masks, b.cloud)
    edited, vacated = edit_masked_points(b.cloud, m3, "remove")
    sup = Supervision.for_removal(b.cameras, b.images, b.depths, b.masks, b.background_images, b.background_depths)
    return RemovalScene(b, m3, edited, vacated, sup)


def mi_by_strategy(rs: RemovalScene, strategies=("none", "ni", "kwa", "gwfa"), cfg: MiConfig = MiConfig()) -> dict:
    b = rs.bundle
    q = FeatureQuantizer.fit(b.cloud.features, cfg.bins)
    out = {}
    for s in strategies:
        out[s] = scene_mi(rs.resampled(s), b.cameras, b.render_config, b.decoder, q, cfg, b.masks)
    return out


@dataclass
class RunResult:
    strategy: str
    convergence_step: int
    trace: np.ndarray
    masked_psnr_init: float
    masked_psnr_final: float
    full_psnr_init: float
    full_psnr_final: float
    seconds: float
    cloud: object = None
    extra: dict = field(default_factory=dict)


def _psnrs(cloud, rs: RemovalScene):
    b = rs.bundle
    masked, full = [], []
    for i, cam in enumerate(b.cameras):
        img = render_view(cloud, cam, b.render_config, b.decoder).color
        masked.append(psnr(img, b.background_images[i], b.masks[i]))
        full.append(psnr(img, rs.supervision.images[i]))
    return float(np.mean(masked)), float(np.mean(full))


def finetune_run(rs: RemovalScene, strategy: str, cfg: TrainConfig, w: LossWeights = LossWeights()) -> RunResult:
    """Resample with ``strategy``, fine-tune, and score masked-region PSNR
    against the background GT and full-image PSNR against the supervision
    (both averaged over views)."""
    b = rs.bundle
    cloud = rs.resampled(strategy)
    m0, f0 = _psnrs(cloud, rs)
    t = time.perf_counter()
    res = finetune(cloud, rs.supervision, b.render_config, b.decoder, cfg, w)
    dt = time.perf_counter() - t
    m1, f1 = _psnrs(res.cloud, rs)
    return RunResult(strategy, res.convergence_step, res.totals(), m0, m1, f0, f1, dt, res.cloud)
