"""Stage-1 diagnostics: coverage, opacity, scales, silhouette IoU, depth."""
import sys
import time
import numpy as np

from rgbnir import oracle as oc
from rgbnir import pipeline as pl
from rgbnir import renderer as rd
from rgbnir.dataset import load_capture_set, load_pfm
from rgbnir.core import normalize

res, views, splats, s1 = 48, 8, 600, int(sys.argv[1]) if len(sys.argv) > 1 else 300
scene_true = oc.two_sphere_scene()
cams = oc.ring_cameras(views, radius=2.3, elevation_deg=18.0,
                       target=np.zeros(3), width=res, height=res)
out_dir = f"/tmp/e2e_{res}_{views}"
import os
if not os.path.exists(out_dir):
    oc.generate_capture_set(scene_true, cams, out_dir)
caps = load_capture_set(out_dir)

center, radius = pl.estimate_bounding_sphere(caps)
print("bounding sphere:", center.round(3), "r =", round(radius, 3))

cfg = pl.PipelineConfig(splats=splats, optim=pl.OptimConfig(steps1=s1, seed=3))
rows = []
t0 = time.time()
scene = pl.stage1(caps, cfg, log_rows=rows)
print(f"stage1 {time.time()-t0:.1f}s")
for i in range(0, len(rows), max(1, len(rows) // 8)):
    r = rows[i]
    print(f"  step {int(r['step']):4d} rec {r['rec']:.4f} geom {r['geom']:.4f} "
          f"mask {r['mask']:.4f} psnr {r['psnr']:.2f}")

op = 1.0 / (1.0 + np.exp(-scene.opacity_logit))
sc = np.exp(scene.log_scale)
print("opacity: min %.3f med %.3f max %.3f" % (op.min(), np.median(op), op.max()))
print("scales:  min %.4f med %.4f max %.4f" % (sc.min(), np.median(sc), sc.max()))
print("center spread:", np.abs(scene.center).max(axis=0).round(3))

for vi in (0, 3):
    v = caps.views[vi]
    view_dirs = normalize(scene.center - v.camera.center)
    radiance, _ = pl.sh_radiance(scene.sh, view_dirs)
    out = rd.rasterize(scene, v.camera, radiance)
    mask = v.mask > 0.5
    sil = out.alpha > 0.5
    iou = (mask & sil).sum() / max((mask | sil).sum(), 1)
    inside = out.alpha[mask]
    gt_depth = load_pfm(os.path.join(out_dir, "ground_truth", f"view_{vi:04d}", "depth.pfm"))
    if gt_depth.ndim == 3:
        gt_depth = gt_depth[..., 0]
    safe = np.maximum(out.alpha, 1e-3)
    dn = out.depth / safe
    both = mask & sil
    derr = np.abs(dn - gt_depth)[both]
    print(f"view {vi}: IoU {iou:.3f} alpha-in-mask med {np.median(inside):.3f} "
          f"frac>0.5 {np.mean(inside > 0.5):.3f} depth err med {np.median(derr) if derr.size else -1:.4f}")
