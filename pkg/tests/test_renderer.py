import numpy as np
import pytest
from hypothesis import given, strategies as st

from nperf.renderer import (
    Decoder,
    RenderConfig,
    StaleRecordsError,
    backward,
    composite,
    render_ray,
    render_view,
    shade_point,
    sigmoid,
)
from nperf.scene import NeuralPointCloud, Ray
from nperf.spatial import PointIndex

from conftest import fd_check, random_cloud, small_camera


# ---------------------------------------------------------------- shading


def test_shade_lone_point_returns_its_feature():
    c = NeuralPointCloud([[0, 0, 0]], [0.7], [[1.0, -2.0]])
    f, ids, w, vac = shade_point(c, PointIndex(c.positions), np.zeros(3), RenderConfig(r_agg=0.5))
    assert not vac and ids == [0] and np.allclose(f, [1, -2])


def test_shade_equidistant_equal_confidence_is_mean():
    c = NeuralPointCloud([[-1, 0, 0], [1, 0, 0]], [0.4, 0.4], [[0.0, 2.0], [4.0, 0.0]])
    f, _, _, _ = shade_point(c, PointIndex(c.positions), np.zeros(3), RenderConfig(r_agg=1.5))
    assert np.allclose(f, [2.0, 1.0])


def test_shade_vacuum():
    c = NeuralPointCloud([[5, 0, 0]], [1.0], [[1.0]])
    f, ids, _, vac = shade_point(c, PointIndex(c.positions), np.zeros(3), RenderConfig(r_agg=1.0))
    assert vac and ids == [] and np.array_equal(f, [0.0])


@given(seed=st.integers(0, 10_000))
def test_shade_matches_direct_weighted_sum(seed):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, n=30, f=5, center_z=0.0, spread=0.6)
    x = rng.uniform(-0.3, 0.3, 3)
    cfg = RenderConfig(r_agg=0.5, max_neighbors=8)
    f, ids, w, vac = shade_point(c, PointIndex(c.positions), x, cfg)
    d = np.linalg.norm(c.positions - x, axis=1)
    order = sorted([i for i in range(30) if d[i] <= 0.5], key=lambda i: (d[i], i))[:8]
    if not order:
        assert vac
        return
    ww = c.confidences[order] / np.maximum(d[order], 1e-6)
    ref = (ww[:, None] * c.features[order]).sum(0) / ww.sum()
    assert ids == order
    assert np.allclose(f, ref, atol=1e-12)


# ---------------------------------------------------------------- quadrature


def test_zero_density_gives_background():
    cfg = RenderConfig(r_agg=0.1, background=(0.2, 0.4, 0.6), t_near=1, t_far=3)
    c = NeuralPointCloud([[10, 10, 10]], [1.0], [[0.0, 0.0, 0.0, 0.0]])
    r = render_ray(c, PointIndex(c.positions), Ray([0, 0, 0], [0, 0, 1], 1, 3), cfg, Decoder.from_seed(0, 4))
    assert np.allclose(r.color, [0.2, 0.4, 0.6]) and r.weight_sum == 0.0


def test_opaque_first_sample():
    ts = np.array([[1.0, 2.0]])
    dl = np.array([[1.0, 1.0]])
    col = np.array([[[0.1, 0.2, 0.3], [0.9, 0.9, 0.9]]])
    c, d, A, *_ = composite(np.array([[1e6, 5.0]]), col, ts, dl, np.zeros(3))
    assert np.allclose(c[0], [0.1, 0.2, 0.3]) and d[0] == pytest.approx(1.0) and A[0] == pytest.approx(1.0)


def test_two_sample_hand_quadrature():
    s1, s2, d1, d2 = 0.7, 1.9, 0.3, 0.5
    c1, c2, bg = np.array([0.2, 0.5, 0.9]), np.array([0.6, 0.1, 0.3]), np.array([0.05, 0.1, 0.15])
    a1, a2 = 1 - np.exp(-s1 * d1), 1 - np.exp(-s2 * d2)
    T2 = 1 - a1
    ref_c = a1 * c1 + T2 * a2 * c2 + (1 - a1 - T2 * a2) * bg
    ref_d = (a1 * 2.0 + T2 * a2 * 2.3) / (a1 + T2 * a2)
    c, d, A, w, T, al, _ = composite(
        np.array([[s1, s2]]), np.stack([c1, c2])[None], np.array([[2.0, 2.3]]), np.array([[d1, d2]]), bg
    )
    assert np.allclose(c[0], ref_c, atol=1e-15) and d[0] == pytest.approx(ref_d, abs=1e-14)
    assert T[0, 1] == pytest.approx(T2)


@given(
    sigma=st.lists(st.floats(0, 200), min_size=2, max_size=12),
    bump=st.floats(0, 50),
    which=st.integers(0, 11),
)
def test_weight_sum_bounded_and_monotone(sigma, bump, which):
    s = np.array([sigma])
    S = s.shape[1]
    ts = np.linspace(1, 2, S)[None]
    dl = np.full((1, S), 1.0 / S)
    col = np.full((1, S, 3), 0.5)
    A0 = composite(s, col, ts, dl, np.zeros(3))[2][0]
    s2 = s.copy()
    s2[0, which % S] += bump
    A1 = composite(s2, col, ts, dl, np.zeros(3))[2][0]
    assert 0.0 <= A0 <= 1.0 and A1 >= A0


def test_empty_cloud_renders_background():
    cam = small_camera()
    out = render_view(NeuralPointCloud.empty(3), cam, RenderConfig(background=(1, 0, 0)), Decoder.from_seed(0, 3))
    assert np.all(out.color == [1, 0, 0]) and np.all(out.weight_sum == 0)


def _plane(z, n=15, spacing=0.05, f=None):
    g = np.stack(np.meshgrid(np.arange(n), np.arange(n), indexing="ij"), -1).reshape(-1, 2) * spacing
    g = g - g.mean(0)
    pos = np.column_stack([g, np.full(len(g), z)])
    return pos


def test_occlusion_depth_is_nearer_surface():
    dec = Decoder(np.ones(2), 0.0, np.zeros((3, 2)), np.zeros(3))
    near, far = _plane(2.5), _plane(3.5)
    pos = np.concatenate([near, far])
    feats = np.full((len(pos), 2), 30.0)  # density ~ 60
    c = NeuralPointCloud(pos, np.ones(len(pos)), feats)
    cfg = RenderConfig(samples_per_ray=64, r_agg=0.08, t_near=1.5, t_far=4.5)
    r = render_ray(c, PointIndex(pos), Ray([0, 0, 0], [0, 0, 1], 1.5, 4.5), cfg, dec)
    spacing = 3.0 / 64
    assert abs(r.depth - 2.5) <= spacing + cfg.r_agg


# ---------------------------------------------------------------- gradients


def test_finite_differences_random_scene():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, n=40, f=6)
    cfg = RenderConfig(samples_per_ray=32, r_agg=0.4, t_near=1.5, t_far=4.5)
    assert fd_check(cloud, small_camera(), cfg, Decoder.from_seed(0, 6), rng) == 0


def test_closed_form_single_point_color_gradient():
    # density does not depend on features, so only the color path carries gradient
    F = 3
    dec = Decoder(np.zeros(F), 2.0, np.random.default_rng(0).normal(size=(3, F)), np.zeros(3))
    f0 = np.array([0.3, -0.2, 0.5])
    c = NeuralPointCloud([[0, 0, 3.4]], [1.0], [f0])
    cfg = RenderConfig(samples_per_ray=2, r_agg=0.3, t_near=2.9, t_far=4.9)
    r = render_ray(c, PointIndex(c.positions), Ray([0, 0, 0], [0, 0, 1], 2.9, 4.9), cfg, dec)
    from nperf.renderer import backward_records, softplus

    alpha = 1 - np.exp(-softplus(2.0) * 1.0)
    cp = dec.w_color @ f0
    sig_prime = sigmoid(cp) * (1 - sigmoid(cp))
    for ch in range(3):
        gC = np.zeros((1, 3))
        gC[0, ch] = 1.0
        gf, _ = backward_records(r.records, c, dec, gC, np.zeros(1))
        assert np.allclose(gf[0], alpha * sig_prime[ch] * dec.w_color[ch], atol=1e-14)


def test_zero_upstream_gradient_gives_zero_buffers():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng)
    cam, cfg, dec = small_camera(), RenderConfig(r_agg=0.4, t_far=4.5), Decoder.from_seed(1, 6)
    out = render_view(cloud, cam, cfg, dec)
    gf, gw = backward(cloud, cam, cfg, dec, np.zeros((4, 4, 3)), np.zeros((4, 4)), out)
    assert not gf.any() and not gw.any()


def test_stale_records_rejected():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng)
    cam, cfg, dec = small_camera(), RenderConfig(r_agg=0.4, t_far=4.5), Decoder.from_seed(1, 6)
    out = render_view(cloud, cam, cfg, dec)
    other = cloud.replace(features=cloud.features + 1)
    with pytest.raises(StaleRecordsError):
        backward(other, cam, cfg, dec, np.ones((4, 4, 3)), np.ones((4, 4)), out)


# ---------------------------------------------------------------- determinism


def test_threads_and_chunking_do_not_change_results(scene, monkeypatch):
    cfg = RenderConfig(**{**scene.render_config.__dict__, "chunk_rays": 100})
    cam = scene.cameras[1]
    g = np.random.default_rng(0).normal(size=(32, 32, 3))
    results = []
    for threads in ("1", "3"):
        monkeypatch.setenv("NPERF_THREADS", threads)
        out = render_view(scene.cloud, cam, cfg, scene.decoder)
        gf, gw = backward(scene.cloud, cam, cfg, scene.decoder, g, np.zeros((32, 32)), out)
        results.append((out.color.tobytes(), out.depth.tobytes(), gf.tobytes(), gw.tobytes()))
    assert results[0] == results[1]


def test_jitter_is_seeded(scene):
    base = scene.render_config.__dict__
    a = render_view(scene.cloud, scene.cameras[0], RenderConfig(**{**base, "jitter": True, "jitter_seed": 4}), scene.decoder)
    b = render_view(scene.cloud, scene.cameras[0], RenderConfig(**{**base, "jitter": True, "jitter_seed": 4}), scene.decoder)
    c = render_view(scene.cloud, scene.cameras[0], scene.render_config, scene.decoder)
    assert a.color.tobytes() == b.color.tobytes()
    assert a.color.tobytes() != c.color.tobytes()


def test_outputs_in_range(scene):
    out = render_view(scene.cloud, scene.cameras[2], scene.render_config, scene.decoder)
    assert out.color.min() >= 0 and out.color.max() <= 1
    assert out.weight_sum.min() >= 0 and out.weight_sum.max() <= 1


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(samples_per_ray=1)
    with pytest.raises(ValueError):
        RenderConfig(r_agg=0)
