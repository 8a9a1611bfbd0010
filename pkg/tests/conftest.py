import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nperf.renderer import backward, render_view
from nperf.scene import Camera, NeuralPointCloud, ObjectSpec, SceneSpec, generate_scene

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def cached_scene(seed=0, kind="sphere", size=0.85):
    return generate_scene(SceneSpec(seed=seed, object=ObjectSpec(kind=kind, size=size)))


@pytest.fixture(scope="session")
def scene():
    return cached_scene()


def random_cloud(rng, n=40, f=6, center_z=3.0, spread=0.5):
    pos = rng.uniform(-spread, spread, (n, 3))
    pos[:, 2] += center_z
    return NeuralPointCloud(pos, rng.uniform(0.2, 0.9, n), rng.normal(size=(n, f)) * 0.5)


def small_camera(size=4, focal=4.0):
    return Camera.look_at([0, 0, 0], [0, 0, 3], [0, 1, 0], focal, focal, size, size)


def fd_check(cloud, cam, cfg, dec, rng, h=1e-5):
    """Central differences of L = <gc, color> + <gd, depth> for every feature
    and confidence entry. Returns the number of entries outside tolerance."""
    gc = rng.normal(size=(cam.height, cam.width, 3))
    gd = rng.normal(size=(cam.height, cam.width))

    def L(c):
        o = render_view(c, cam, cfg, dec)
        return (o.color * gc).sum() + (o.depth * gd).sum()

    out = render_view(cloud, cam, cfg, dec)
    gf, gw = backward(cloud, cam, cfg, dec, gc, gd, out)
    bad = 0
    N, F = cloud.features.shape
    for i in range(N):
        for j in range(F):
            f = cloud.features.copy()
            f[i, j] += h
            lp = L(cloud.replace(features=f))
            f[i, j] -= 2 * h
            lm = L(cloud.replace(features=f))
            fd = (lp - lm) / (2 * h)
            err = abs(fd - gf[i, j])
            bad += err > 1e-8 and err > 1e-4 * abs(fd)
        w = cloud.confidences.copy()
        w[i] += h
        lp = L(cloud.replace(confidences=w))
        w[i] -= 2 * h
        lm = L(cloud.replace(confidences=w))
        fd = (lp - lm) / (2 * h)
        err = abs(fd - gw[i])
        bad += err > 1e-8 and err > 1e-4 * abs(fd)
    return bad


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {line}")
