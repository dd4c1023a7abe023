"""Smoke test for the homelight_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math
import os
import sys
import tempfile

import homelight_py as hl

try:
    import numpy as np
except ImportError:
    np = None


def check(cond, msg):
    if not cond:
        print("FAIL:", msg)
        sys.exit(1)
    print("ok:", msg)


def main():
    d = hl.beckmann_d(0.5, 1.0)
    check(abs(d - 1.0 / (math.pi * 0.25)) < 1e-9, "beckmann peak is 1/(pi m^2)")
    check(abs(hl.fresnel_schlick(0.05, 1.0) - 0.05) < 1e-12, "schlick at normal incidence")
    rgb = hl.eval_brdf([0.5, 0.5, 0.5], 0.3, [0, 0, 1], [0, 0, 1], [0, 0, 1])
    check(all(v > 0.5 / math.pi for v in rgb), "brdf exceeds the diffuse term at the specular peak")

    init_rec, resnet = hl.parameter_counts(64)
    print("parameters: InitNet+RecNet", init_rec, "ResNet", resnet)
    check(init_rec > 0 and resnet > 0, "parameter counts")

    active = hl.sample_active_images(7)
    check(len(active) == 6 and active[0], "front slot always active")

    bundle = hl.generate_bundle(3, 64)
    normal, mask = bundle.normal, bundle.mask
    check((normal.width, normal.height, normal.channels) == (64, 64, 3), "bundle normal shape")
    check(len(bundle.images) == 6, "six renders")
    mae = hl.mean_angular_error(normal, normal, mask)
    check(mae < 1e-6, "ground truth scores zero MAE")

    if np is not None:
        arr = np.frombuffer(normal.to_bytes(), dtype="<f4").reshape(3, 64, 64)
        m = np.frombuffer(mask.to_bytes(), dtype="<f4").reshape(64, 64) > 0.5
        norms = np.linalg.norm(arr[:, m], axis=0)
        check(np.allclose(norms, 1.0, atol=1e-3), "foreground normals are unit length (numpy)")

    depth = hl.integrate_normals(normal, mask)
    check((depth.width, depth.height, depth.channels) == (64, 64, 1), "depth shape")

    net = hl.Network(width=8, seed=1)
    stack = bundle.stack([True, True, False, True, False, False])
    levels = net.predict(stack)
    check([lv[0].width for lv in levels] == [32, 64], "pyramid sizes")
    losses = net.train([bundle], steps=2, batch_size=1, learning_rate=1e-3)
    check(len(losses) == 2 and all(math.isfinite(x) for x in losses), "two finite training steps")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.ckpt")
        net.save(path)
        back = hl.Network.load(path)
        check(back.fingerprint == net.fingerprint, "checkpoint round trip")
        bundle.save(os.path.join(tmp, "scene"))
        again = hl.RenderBundle.load(os.path.join(tmp, "scene"))
        check(again.mask.tolist() == mask.tolist(), "bundle round trip")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
