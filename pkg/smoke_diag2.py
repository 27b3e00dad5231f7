"""Track stage-1 geometry quality vs steps; then locate stage-2 NIR error."""
import os
import sys
import time
import numpy as np

from rgbnir import oracle as oc
from rgbnir import pipeline as pl
from rgbnir import renderer as rd
from rgbnir import metrics as mt
from rgbnir.dataset import load_capture_set, load_pfm
from rgbnir.core import normalize

res, views = 48, 8
out_dir = f"/tmp/e2e_{res}_{views}"
caps = load_capture_set(out_dir)
splats = int(sys.argv[1]) if len(sys.argv) > 1 else 600


def geom_quality(scene, tag):
    maes, derrs, ious = [], [], []
    for vi in range(views):
        v = caps.views[vi]
        vd = normalize(scene.center - v.camera.center)
        radiance, _ = pl.sh_radiance(scene.sh, vd)
        out = rd.rasterize(scene, v.camera, radiance)
        mask = v.mask > 0.5
        sil = out.alpha > 0.5
        ious.append((mask & sil).sum() / max((mask | sil).sum(), 1))
        gt_n = load_pfm(os.path.join(out_dir, "ground_truth", f"view_{vi:04d}", "normal.pfm"))
        gt_d = load_pfm(os.path.join(out_dir, "ground_truth", f"view_{vi:04d}", "depth.pfm"))
        if gt_d.ndim == 3:
            gt_d = gt_d[..., 0]
        both = mask & sil
        if not both.any():
            continue
        nm = out.normal / np.maximum(np.linalg.norm(out.normal, axis=-1, keepdims=True), 1e-9)
        maes.append(mt.normal_mae(nm, gt_n, mask=both))
        dn = out.depth / np.maximum(out.alpha, 1e-3)
        derrs.append(float(np.median(np.abs(dn - gt_d)[both])))
    print(f"{tag}: IoU {np.mean(ious):.3f} normal MAE {np.mean(maes):.2f} deg "
          f"depth med err {np.mean(derrs):.4f}")


opt = pl.OptimConfig(steps1=100, lr1=0.05, seed=3, batch_views=0)
cfg = pl.PipelineConfig(splats=splats, optim=opt)
t0 = time.time()
scene = pl.stage1(caps, cfg)
geom_quality(scene, f"after 100 steps ({time.time()-t0:.0f}s)")
cont = pl.PipelineConfig(splats=splats, optim=opt,
                         loss=pl.LossWeights(geom_warmup=0.0))
for seg in range(3):
    scene.stage = "seeded"
    t0 = time.time()
    scene = pl.stage1(caps, cont, scene=scene)
    geom_quality(scene, f"after {200 + 100*seg} steps ({time.time()-t0:.0f}s)")
op = 1.0/(1.0+np.exp(-scene.opacity_logit))
sc = np.exp(scene.log_scale)
print("op med %.3f  scale med %.4f max %.4f" % (np.median(op), np.median(sc), sc.max()))
