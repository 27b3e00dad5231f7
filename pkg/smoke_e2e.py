"""Small end-to-end run: oracle captures -> 3 stages -> compare vs truth."""
import sys
import time
import numpy as np

from rgbnir import oracle as oc
from rgbnir import pipeline as pl
from rgbnir import renderer as rd
from rgbnir import metrics as mt
from rgbnir.dataset import load_capture_set
from rgbnir.envlight import EnvironmentMap

res = int(sys.argv[1]) if len(sys.argv) > 1 else 48
views = int(sys.argv[2]) if len(sys.argv) > 2 else 8
splats = int(sys.argv[3]) if len(sys.argv) > 3 else 600
s1 = int(sys.argv[4]) if len(sys.argv) > 4 else 300
s2 = int(sys.argv[5]) if len(sys.argv) > 5 else 200
s3 = int(sys.argv[6]) if len(sys.argv) > 6 else 150
known_env = "--known-env" in sys.argv

t0 = time.time()
scene_true = oc.two_sphere_scene()
cams = oc.ring_cameras(views, radius=2.3, elevation_deg=18.0,
                       target=np.zeros(3), width=res, height=res)
out_dir = f"/tmp/e2e_{res}_{views}"
oc.generate_capture_set(scene_true, cams, out_dir)
print(f"captures: {time.time()-t0:.1f}s")

caps = load_capture_set(out_dir)
cfg = pl.PipelineConfig(splats=splats,
                        optim=pl.OptimConfig(steps1=s1, steps2=s2, steps3=s3, seed=3))

t1 = time.time()
rows = []
scene = pl.stage1(caps, cfg, log_rows=rows)
print(f"stage1 {time.time()-t1:.1f}s last rows:")
for r in rows[-3:]:
    print("  ", {k: round(float(v), 4) for k, v in r.items()})

t2 = time.time()
scene = pl.stage2(scene, caps, cfg, log_rows=rows)
print(f"stage2 {time.time()-t2:.1f}s last rows:")
for r in rows[-3:]:
    print("  ", {k: round(float(v), 4) for k, v in r.items()})
scene = pl.transfer_cross_spectral(scene)

env_init = None
freeze = False
if known_env:
    env_init = scene_true.env
    freeze = True
t3 = time.time()
scene, env = pl.stage3(scene, caps, cfg, env_init=env_init, freeze_env=freeze,
                       log_rows=rows)
print(f"stage3 {time.time()-t3:.1f}s last rows:")
for r in rows[-3:]:
    print("  ", {k: round(float(v), 4) for k, v in r.items()})

# ---- evaluate against ground truth maps on view 0 ----
import os
gt_dir = os.path.join(out_dir, "ground_truth", "view_0000")
from rgbnir.dataset import load_pfm
gt_alb = load_pfm(os.path.join(gt_dir, "albedo_rgb.pfm"))
gt_nrm = load_pfm(os.path.join(gt_dir, "normal.pfm"))
gt_sig = load_pfm(os.path.join(gt_dir, "roughness.pfm"))[..., 0] if load_pfm(os.path.join(gt_dir, "roughness.pfm")).ndim == 3 else load_pfm(os.path.join(gt_dir, "roughness.pfm"))
mask = caps.views[0].mask > 0.5

maps = rd.rasterize_attributes(scene, caps.views[0].camera)
cover = mask & (maps.alpha > 0.5)
print("coverage inside mask:", cover.sum() / max(mask.sum(), 1))
alb_psnr = mt.psnr(maps.albedo_rgb, gt_alb, mask=cover)
sig_rmse = mt.rmse(maps.sigma, gt_sig, mask=cover)
nrm_pred = maps.normal / np.maximum(np.linalg.norm(maps.normal, axis=-1, keepdims=True), 1e-9)
mae = mt.normal_mae(nrm_pred, gt_nrm, mask=cover)
print(f"albedo PSNR {alb_psnr:.2f} dB | sigma RMSE {sig_rmse:.4f} | normal MAE {mae:.2f} deg")
print(f"total {time.time()-t0:.1f}s")
