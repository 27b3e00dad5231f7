"""Quick stage-1 ablations: find what blocks silhouette coverage."""
import sys
import time
import numpy as np

from rgbnir import oracle as oc
from rgbnir import pipeline as pl
from rgbnir import renderer as rd
from rgbnir.dataset import load_capture_set
from rgbnir.core import normalize

res, views = 48, 8
out_dir = f"/tmp/e2e_{res}_{views}"
caps = load_capture_set(out_dir)


def run(tag, steps, lw, lr_scales=None, lr=0.02, splats=600, batch=1):
    opt = pl.OptimConfig(steps1=steps, lr1=lr, seed=3, batch_views=batch)
    if lr_scales:
        opt.lr_scales = {**opt.lr_scales, **lr_scales}
    cfg = pl.PipelineConfig(splats=splats, optim=opt, loss=lw)
    t0 = time.time()
    scene = pl.stage1(caps, cfg)
    dt = time.time() - t0
    op = 1.0 / (1.0 + np.exp(-scene.opacity_logit))
    ious = []
    fracs = []
    for vi in range(0, views, 3):
        v = caps.views[vi]
        vd = normalize(scene.center - v.camera.center)
        radiance, _ = pl.sh_radiance(scene.sh, vd)
        out = rd.rasterize(scene, v.camera, radiance)
        mask = v.mask > 0.5
        sil = out.alpha > 0.5
        ious.append((mask & sil).sum() / max((mask | sil).sum(), 1))
        fracs.append(np.mean(out.alpha[mask] > 0.5))
    print(f"{tag:34s} {dt:5.1f}s op-med {np.median(op):.3f} "
          f"IoU {np.mean(ious):.3f} frac>0.5 {np.mean(fracs):.3f}")
    return scene


W = pl.LossWeights
run("rr 600 (baseline)", 600, W())
run("batch8 75 lr.02", 75, W(), batch=0)
run("batch8 75 lr.05", 75, W(), lr=0.05, batch=0)
run("batch8 150 lr.05", 150, W(), lr=0.05, batch=0)
run("batch2 300 lr.03", 300, W(), lr=0.03, batch=2)
