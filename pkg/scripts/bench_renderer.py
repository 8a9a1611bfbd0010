"""Forward/backward timing of one 32x32 view of the default scene for a few
worker counts (NPERF_THREADS), plus a bit-identity check across them."""

import argparse
import os
import time

import numpy as np

from nperf.renderer import backward, render_view
from nperf.scene import SceneSpec, generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--threads", default="1,2,4")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    b = generate_scene(SceneSpec())
    cam = b.cameras[0]
    g = np.random.default_rng(0).normal(size=(cam.height, cam.width, 3))
    ref = None
    for n in args.threads.split(","):
        os.environ["NPERF_THREADS"] = n
        fwd, bwd = [], []
        for _ in range(args.repeats):
            t = time.perf_counter()
            out = render_view(b.cloud, cam, b.render_config, b.decoder)
            fwd.append(time.perf_counter() - t)
            t = time.perf_counter()
            gf, gw = backward(b.cloud, cam, b.render_config, b.decoder, g, np.zeros(cam.shape), out)
            bwd.append(time.perf_counter() - t)
        key = out.color.tobytes() + gf.tobytes() + gw.tobytes()
        same = ref is None or key == ref
        ref = ref or key
        print(f"threads={n}: forward {min(fwd) * 1e3:7.1f} ms  backward {min(bwd) * 1e3:7.1f} ms  identical={same}")


if __name__ == "__main__":
    main()
