import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nperf.renderer import Decoder, RenderConfig, backward, render_view
from nperf.scene import DepthMap, Mask2D
from nperf.train import (
    LossWeights,
    NumericalError,
    Supervision,
    TrainConfig,
    binary_entropy,
    convergence_step,
    finetune,
    loss,
    perceptual_proxy,
)

from conftest import random_cloud, small_camera


class View:
    def __init__(self, color, depth):
        self.color, self.depth = color, depth


def loop_convergence(x, W, thr, settle=0.05):
    """Direct transcription of the windowed plateau rule."""
    n = len(x)
    ma = {s: sum(x[s - W + 1 : s + 1]) / W for s in range(W - 1, n)}
    final = ma[n - 1]
    for s in range(W, n):
        if abs(ma[s] - ma[s - 1]) / abs(ma[s - 1]) < thr and all(
            abs(ma[t] - final) <= settle * abs(final) for t in range(s, n)
        ):
            return s
    return n


# ---------------------------------------------------------------- loss


def test_perfect_prediction_loss_is_zero_within_clamp():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16, 3))
    depth = rng.uniform(2, 4, (16, 16))
    m = np.zeros((16, 16), bool)
    m[4:12, 4:12] = True
    cloud = random_cloud(rng, n=10).replace(confidences=np.array([0.0, 1.0] * 5))
    res = loss(View(img, depth), img, DepthMap(depth), Mask2D(m), cloud, LossWeights())
    h_eps = -(1e-6 * math.log(1e-6) + (1 - 1e-6) * math.log(1 - 1e-6))
    assert res.components["color"] == 0 and res.components["per"] == 0 and res.components["depth"] == 0
    assert res.components["sparse"] == pytest.approx(h_eps, rel=1e-9)
    assert res.total < 1e-8
    assert not res.grad_color.any() and not res.grad_depth.any() and not res.grad_confidences.any()


def test_default_loss_weights():
    w = LossWeights()
    assert (w.per, w.depth, w.sparse) == (1e-2, 1e-3, 1e-4)
    with pytest.raises(ValueError):
        LossWeights(per=-1)


@given(seed=st.integers(0, 10_000))
def test_total_is_sum_of_weighted_components(seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(4, 20, 2)
    pred = View(rng.uniform(size=(H, W, 3)), rng.uniform(1, 5, (H, W)))
    gd = rng.uniform(1, 5, (H, W))
    gd[rng.uniform(size=gd.shape) < 0.2] = np.inf
    m = rng.uniform(size=(H, W)) < 0.4
    w = LossWeights(*rng.uniform(0, 1, 3))
    cloud = random_cloud(rng, n=12)
    res = loss(pred, rng.uniform(size=(H, W, 3)), gd, m, cloud, w)
    c = res.components
    assert abs(res.total - (c["color"] + w.per * c["per"] + w.depth * c["depth"] + w.sparse * c["sparse"])) <= 1e-12
    assert c["sparse"] == pytest.approx(binary_entropy(cloud.confidences).mean())


def test_loss_rejects_shape_mismatch():
    cloud = random_cloud(np.random.default_rng(0))
    with pytest.raises(ValueError):
        loss(View(np.zeros((4, 4, 3)), np.zeros((4, 4))), np.zeros((4, 5, 3)), np.zeros((4, 4)), np.zeros((4, 4), bool), cloud, LossWeights())


def test_proxy_only_sees_masked_pixels():
    rng = np.random.default_rng(1)
    t = rng.uniform(size=(16, 16, 3))
    x = t.copy()
    m = np.zeros((16, 16), bool)
    m[:8, :8] = True
    x[~m] += 0.5
    v, g = perceptual_proxy(x, t, m)
    assert v == 0.0 and not g.any()
    assert perceptual_proxy(x, t, np.zeros((16, 16), bool))[0] == 0.0


@pytest.mark.parametrize("shape", [(16, 16), (13, 21)])
def test_proxy_gradient_matches_finite_differences(shape):
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(*shape, 3))
    t = rng.uniform(size=(*shape, 3))
    m = rng.uniform(size=shape) < 0.6
    _, g = perceptual_proxy(x, t, m)
    h = 1e-6
    for _ in range(40):
        i, j, c = rng.integers(shape[0]), rng.integers(shape[1]), rng.integers(3)
        xp, xm = x.copy(), x.copy()
        xp[i, j, c] += h
        xm[i, j, c] -= h
        fd = (perceptual_proxy(xp, t, m)[0] - perceptual_proxy(xm, t, m)[0]) / (2 * h)
        assert abs(fd - g[i, j, c]) <= 1e-8 + 1e-5 * abs(fd)


def _scene_setup(seed=0):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n=30, f=6)
    cam = small_camera(size=6, focal=6)
    cfg = RenderConfig(samples_per_ray=24, r_agg=0.4, t_near=1.5, t_far=4.5)
    dec = Decoder.from_seed(0, 6)
    img = rng.uniform(size=(6, 6, 3))
    gd = rng.uniform(2.5, 3.5, (6, 6))
    m = np.zeros((6, 6), bool)
    m[1:4, 2:5] = True
    return cloud, cam, cfg, dec, img, gd, m


def _total(cloud, cam, cfg, dec, img, gd, m, w):
    out = render_view(cloud, cam, cfg, dec)
    return loss(out, img, gd, m, cloud, w), out


def test_full_loss_gradient_matches_finite_differences():
    cloud, cam, cfg, dec, img, gd, m = _scene_setup()
    w = LossWeights(per=0.5, depth=0.1, sparse=0.05)
    res, out = _total(cloud, cam, cfg, dec, img, gd, m, w)
    gf, gw = backward(cloud, cam, cfg, dec, res.grad_color, res.grad_depth, out)
    gw = gw + res.grad_confidences
    h = 1e-6
    rng = np.random.default_rng(5)
    for _ in range(25):
        i, j = rng.integers(len(cloud)), rng.integers(6)
        f = cloud.features.copy()
        f[i, j] += h
        lp = _total(cloud.replace(features=f), cam, cfg, dec, img, gd, m, w)[0].total
        f[i, j] -= 2 * h
        lm = _total(cloud.replace(features=f), cam, cfg, dec, img, gd, m, w)[0].total
        fd = (lp - lm) / (2 * h)
        assert abs(fd - gf[i, j]) <= 1e-8 + 1e-4 * abs(fd)
    for i in rng.choice(len(cloud), 8, replace=False):
        c = cloud.confidences.copy()
        c[i] += h
        lp = _total(cloud.replace(confidences=c), cam, cfg, dec, img, gd, m, w)[0].total
        c[i] -= 2 * h
        lm = _total(cloud.replace(confidences=c), cam, cfg, dec, img, gd, m, w)[0].total
        fd = (lp - lm) / (2 * h)
        assert abs(fd - gw[i]) <= 1e-8 + 1e-4 * abs(fd)


def test_line_search_probe_descends():
    cloud, cam, cfg, dec, img, gd, m = _scene_setup(3)
    w = LossWeights()
    res, out = _total(cloud, cam, cfg, dec, img, gd, m, w)
    gf, gw = backward(cloud, cam, cfg, dec, res.grad_color, res.grad_depth, out)
    gw = gw + res.grad_confidences
    for eta in (1e-1, 1e-2, 1e-3):
        moved = cloud.replace(
            features=cloud.features - eta * gf, confidences=np.clip(cloud.confidences - eta * gw, 0, 1)
        )
        assert _total(moved, cam, cfg, dec, img, gd, m, w)[0].total < res.total


# ---------------------------------------------------------------- convergence


def test_convergence_constant_and_increasing():
    assert convergence_step([0.3] * 250, 100) == 100
    assert convergence_step(np.arange(1.0, 301.0), 100) == 300
    with pytest.raises(ValueError):
        convergence_step([1.0] * 50, 100)


@pytest.mark.parametrize("rho", [0.9995, 0.9992, 0.998, 0.99])
def test_convergence_pure_exponential_analytic(rho):
    # MA relative change is exactly 1 - rho; the settle band fixes the tail
    n, W, thr = 1500, 100, 1e-3
    x = rho ** np.arange(n)
    if 1 - rho >= thr:
        expected = n
    else:
        expected = max(W, n - 1 - math.floor(math.log(1.05) / -math.log(rho)))
    assert convergence_step(x, W, thr) == expected


@given(
    rho=st.floats(0.95, 0.9999).filter(lambda r: abs((1 - r) - 1e-3) > 1e-9),
    c=st.floats(0.0, 2.0),
    a=st.floats(0.1, 5.0),
)
def test_convergence_matches_loop_rule(rho, c, a):
    # rho = 0.999 sits exactly on the threshold and is decided by rounding
    x = list(c + a * rho ** np.arange(400))
    assert convergence_step(x, 50, 1e-3) == loop_convergence(x, 50, 1e-3)


# ---------------------------------------------------------------- finetune


def _supervision(scene):
    return Supervision(list(scene.cameras), list(scene.images), list(scene.depths), list(scene.masks))


def test_zero_steps_is_passthrough(scene):
    cfg = TrainConfig(max_steps=0)
    r = finetune(scene.cloud, _supervision(scene), scene.render_config, scene.decoder, cfg)
    assert r.cloud is scene.cloud and r.convergence_step == 0 and r.trace == []


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(max_steps=50, window=100)


def test_finetune_freezes_positions_and_is_deterministic(scene):
    noisy = scene.cloud.replace(
        features=scene.cloud.features + np.random.default_rng(0).normal(scale=0.3, size=scene.cloud.features.shape)
    )
    cfg = TrainConfig(max_steps=12, window=4, rays_per_step=256, seed=7)
    a = finetune(noisy, _supervision(scene), scene.render_config, scene.decoder, cfg)
    b = finetune(noisy, _supervision(scene), scene.render_config, scene.decoder, cfg)
    assert a.cloud.positions.tobytes() == noisy.positions.tobytes()
    assert [r["total"] for r in a.trace] == [r["total"] for r in b.trace]
    assert a.cloud.features.tobytes() == b.cloud.features.tobytes()
    assert np.all((a.cloud.confidences >= 0) & (a.cloud.confidences <= 1))
    assert set(a.trace[0]) == {"step", "total", "color", "per", "depth", "sparse"}
    assert not np.array_equal(a.cloud.features, noisy.features)


def test_perfect_cloud_converges_within_window(scene):
    cfg = TrainConfig(max_steps=150)
    r = finetune(scene.cloud, _supervision(scene), scene.render_config, scene.decoder, cfg)
    assert r.totals().max() < 1e-3
    assert r.convergence_step <= cfg.window


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_breakdown(scene):
    # pre-activations overflow float64, so the decoder yields NaN
    bad = scene.cloud.replace(features=np.full(scene.cloud.features.shape, 1.7e308))
    cfg = TrainConfig(max_steps=10, window=5)
    with pytest.raises(NumericalError) as e:
        finetune(bad, _supervision(scene), scene.render_config, scene.decoder, cfg)
    assert e.value.step == 0 and set(e.value.components) == {"color", "per", "depth", "sparse"}
    assert np.isnan(e.value.components["color"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_step_size_aborts_later(scene):
    cfg = TrainConfig(lr=1e305, max_steps=10, window=5)
    with pytest.raises(NumericalError) as e:
        finetune(scene.cloud, _supervision(scene), scene.render_config, scene.decoder, cfg)
    assert e.value.step >= 1
