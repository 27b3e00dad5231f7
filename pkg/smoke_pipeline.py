"""FD validation of every hand-written gradient path in pipeline.py."""
import numpy as np

from rgbnir import pipeline as pl
from rgbnir import renderer as rd
from rgbnir import brdf as bf
from rgbnir.core import Camera, FlashModel, look_at_camera
from rgbnir.scene import seed_scene, quat_frame_jacobians, quat_raw_chain
from rgbnir.envlight import EnvironmentMap, mis_points

rng = np.random.default_rng(7)


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


# ---- 1. NIR radiance batch: value vs scalar reference, grads vs FD ----
scene = seed_scene(np.zeros(3), 0.5, 12, 4, rng)
scene.mixture_logit[:] = rng.normal(0, 1, scene.mixture_logit.shape)
scene.basis_rho_raw[:] = rng.normal(0, 0.5, 4)
scene.basis_sigma_raw[:] = rng.normal(0, 0.5, 4)
scene.basis_m_raw[:] = rng.normal(0, 0.5, 4)
def make_cam(pos, target, wh=32, fov=45.0):
    f = wh / (2 * np.tan(np.radians(fov) / 2))
    return look_at_camera(pos, target, np.array([0., 1., 0.]), f, f,
                          (wh - 1) / 2, (wh - 1) / 2, wh, wh)

cam = make_cam(np.array([0.0, 0.3, -2.0]), np.zeros(3))
flash = FlashModel(offset=np.array([0.06, -0.02, 0.0]), intensity=3.5)

val, cache = pl._nir_radiance_batch(scene, cam, flash)

# scalar reference for a few splats
_, _, nrm = scene.frames()
for idx in (0, 3, 7):
    o = cam.center - scene.center[idx]
    o = o / np.linalg.norm(o)
    s = 1.0 if nrm[idx] @ o >= 0 else -1.0
    ref = pl.nir_shading(scene.center[idx], s * nrm[idx], scene.bases,
                         scene.mixture_weights[idx], flash, cam)
    assert rel(val[idx], ref) < 1e-12, (idx, val[idx], ref)
print("nir batch matches scalar reference")

d_val = rng.normal(0, 1, val.shape)
g = pl._nir_radiance_backward(scene, cache, d_val)

def loss_nir():
    v, _ = pl._nir_radiance_batch(scene, cam, flash)
    return float(np.dot(d_val, v))

eps = 1e-6
bad = 0
for name, arr in (("center", scene.center), ("mixture_logit", scene.mixture_logit),
                  ("basis_rho_raw", scene.basis_rho_raw),
                  ("basis_sigma_raw", scene.basis_sigma_raw),
                  ("basis_m_raw", scene.basis_m_raw)):
    gname = name
    flat = arr.reshape(-1)
    gflat = g[gname].reshape(-1)
    for k in rng.choice(flat.size, size=min(12, flat.size), replace=False):
        old = flat[k]
        flat[k] = old + eps; lp = loss_nir()
        flat[k] = old - eps; lm = loss_nir()
        flat[k] = old
        fd = (lp - lm) / (2 * eps)
        if rel(fd, gflat[k]) > 2e-4 and abs(fd - gflat[k]) > 1e-7:
            print("MISMATCH", name, k, fd, gflat[k]); bad += 1

# quat: backward returns grad wrt frame normal; chain like stage2 does
_, _, j_n = quat_frame_jacobians(scene.quat)
g_quat = quat_raw_chain(scene.quat, np.einsum("mi,mij->mj", g["normal"], j_n))
flat = scene.quat.reshape(-1)
gflat = g_quat.reshape(-1)
for k in rng.choice(flat.size, size=12, replace=False):
    old = flat[k]
    flat[k] = old + eps; lp = loss_nir()
    flat[k] = old - eps; lm = loss_nir()
    flat[k] = old
    fd = (lp - lm) / (2 * eps)
    if rel(fd, gflat[k]) > 2e-4 and abs(fd - gflat[k]) > 1e-7:
        print("MISMATCH quat", k, fd, gflat[k]); bad += 1
print("nir backward FD mismatches:", bad)
assert bad == 0

# ---- 2. depth_normal_loss adjoints vs FD on depth/normal maps ----
radiance = rng.random((scene.count, 3))
out = rd.rasterize(scene, cam, radiance)
valid = out.alpha > 0.3
l0, g_depth, g_alpha, g_normal = pl.depth_normal_loss(out, valid)
print("depth-normal loss:", l0)

bad = 0
for k in rng.choice(out.depth.size, size=15, replace=False):
    old = out.depth.reshape(-1)[k]
    out.depth.reshape(-1)[k] = old + eps
    lp = pl.depth_normal_loss(out, valid)[0]
    out.depth.reshape(-1)[k] = old - eps
    lm = pl.depth_normal_loss(out, valid)[0]
    out.depth.reshape(-1)[k] = old
    fd = (lp - lm) / (2 * eps)
    if rel(fd, g_depth.reshape(-1)[k]) > 5e-4 and abs(fd - g_depth.reshape(-1)[k]) > 1e-8:
        print("MISMATCH depth", k, fd, g_depth.reshape(-1)[k]); bad += 1
for k in rng.choice(out.normal.size, size=15, replace=False):
    old = out.normal.reshape(-1)[k]
    out.normal.reshape(-1)[k] = old + eps
    lp = pl.depth_normal_loss(out, valid)[0]
    out.normal.reshape(-1)[k] = old - eps
    lm = pl.depth_normal_loss(out, valid)[0]
    out.normal.reshape(-1)[k] = old
    fd = (lp - lm) / (2 * eps)
    if rel(fd, g_normal.reshape(-1)[k]) > 5e-4 and abs(fd - g_normal.reshape(-1)[k]) > 1e-8:
        print("MISMATCH normal", k, fd, g_normal.reshape(-1)[k]); bad += 1
for k in rng.choice(out.alpha.size, size=15, replace=False):
    old = out.alpha.reshape(-1)[k]
    out.alpha.reshape(-1)[k] = old + eps
    lp = pl.depth_normal_loss(out, valid)[0]
    out.alpha.reshape(-1)[k] = old - eps
    lm = pl.depth_normal_loss(out, valid)[0]
    out.alpha.reshape(-1)[k] = old
    fd = (lp - lm) / (2 * eps)
    if rel(fd, g_alpha.reshape(-1)[k]) > 5e-4 and abs(fd - g_alpha.reshape(-1)[k]) > 1e-8:
        print("MISMATCH alpha", k, fd, g_alpha.reshape(-1)[k]); bad += 1
print("depth-normal FD mismatches:", bad)
assert bad == 0

# flat plane sanity: loss should be ~0 for a big front-facing splat
flat_scene = seed_scene(np.zeros(3), 0.3, 1, 4, rng)
flat_scene.center[0] = [0, 0, 0]
flat_scene.quat[:] = [1, 0, 0, 0]          # normal = +z, camera looks down -z... check
flat_scene.log_scale[:] = np.log(2.0)
flat_scene.opacity_logit[:] = 50.0
cam_flat = make_cam(np.array([0.0, 0.0, -2.0]), np.zeros(3), 24, 30.0)
outf = rd.rasterize(flat_scene, cam_flat, np.ones((1, 1)))
lf = pl.depth_normal_loss(outf, outf.alpha > 0.5)[0]
print("flat plane depth-normal loss:", lf, "(alpha mean", outf.alpha.mean(), ")")
assert lf < 1e-6

# ---- 3. edge_weighted_smoothness FD ----
maps = rng.random((9, 11, 3))
guide = rng.random((9, 11))
valid = rng.random((9, 11)) > 0.2
l0, gm = pl.edge_weighted_smoothness(maps, guide, 8.0, valid)
bad = 0
for k in rng.choice(maps.size, size=25, replace=False):
    old = maps.reshape(-1)[k]
    maps.reshape(-1)[k] = old + eps
    lp, _ = pl.edge_weighted_smoothness(maps, guide, 8.0, valid)
    maps.reshape(-1)[k] = old - eps
    lm, _ = pl.edge_weighted_smoothness(maps, guide, 8.0, valid)
    maps.reshape(-1)[k] = old
    fd = (lp - lm) / (2 * eps)
    if rel(fd, gm.reshape(-1)[k]) > 1e-5 and abs(fd - gm.reshape(-1)[k]) > 1e-9:
        print("MISMATCH smooth", k, fd, gm.reshape(-1)[k]); bad += 1
print("smoothness FD mismatches:", bad)
assert bad == 0

# ---- 4. SH radiance backward FD ----
dirs = rng.normal(0, 1, (6, 3))
dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
sh = rng.normal(0, 0.4, (6, 3, 9))
gsel = rng.normal(0, 1, (6, 3))
rgb, cache = pl.sh_radiance(sh, dirs)
gsh = pl.sh_radiance_backward(cache, gsel)
bad = 0
for k in rng.choice(sh.size, size=20, replace=False):
    old = sh.reshape(-1)[k]
    sh.reshape(-1)[k] = old + eps
    lp = float((pl.sh_radiance(sh, dirs)[0] * gsel).sum())
    sh.reshape(-1)[k] = old - eps
    lm = float((pl.sh_radiance(sh, dirs)[0] * gsel).sum())
    sh.reshape(-1)[k] = old
    fd = (lp - lm) / (2 * eps)
    if rel(fd, gsh.reshape(-1)[k]) > 1e-6 and abs(fd - gsh.reshape(-1)[k]) > 1e-9:
        print("MISMATCH sh", k, fd, gsh.reshape(-1)[k]); bad += 1
print("sh FD mismatches:", bad)
assert bad == 0
print("smoke ok")
