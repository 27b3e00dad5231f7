"""Is the blend or the splats themselves the problem? Compare per-pixel
blended depth/normal vs the dominant contributor's values."""
import os
import numpy as np

from rgbnir import pipeline as pl
from rgbnir import renderer as rd
from rgbnir import metrics as mt
from rgbnir.dataset import load_capture_set, load_pfm
from rgbnir.core import normalize, pixel_rays
from rgbnir.scene import quat_to_frames

res, views = 48, 8
out_dir = f"/tmp/e2e_{res}_{views}"
caps = load_capture_set(out_dir)

cfg = pl.PipelineConfig(splats=600, optim=pl.OptimConfig(
    steps1=150, lr1=0.05, seed=3, batch_views=0))
scene = pl.stage1(caps, cfg)

tu, tv, nrm_all = quat_to_frames(scene.quat)
for vi in (0, 4):
    v = caps.views[vi]
    cam = v.camera
    vd = normalize(scene.center - cam.center)
    radiance, _ = pl.sh_radiance(scene.sh, vd)
    out = rd.rasterize(scene, cam, radiance)
    mask = v.mask > 0.5
    both = mask & (out.alpha > 0.5)
    gt_n = load_pfm(os.path.join(out_dir, "ground_truth", f"view_{vi:04d}", "normal.pfm"))
    gt_d = load_pfm(os.path.join(out_dir, "ground_truth", f"view_{vi:04d}", "depth.pfm"))
    if gt_d.ndim == 3:
        gt_d = gt_d[..., 0]

    c = out.contributors
    w = c.trans * c.alpha
    n_pix = cam.height * cam.width
    # dominant contributor per pixel
    best_w = np.zeros(n_pix)
    best_i = np.full(n_pix, -1, dtype=np.int64)
    order = np.argsort(w)  # ascending; later overwrites win
    np.minimum.at(best_w, c.pixel[order], 0)  # touch
    best_w[c.pixel[order]] = w[order]
    best_i[c.pixel[order]] = order
    sel = best_i[both.reshape(-1)]
    sel = sel[sel >= 0]
    top_t = c.t[sel]
    top_g = c.gauss[sel]
    top_n = nrm_all[top_g] * c.sign[sel][:, None]

    flat_ids = np.flatnonzero(both.reshape(-1))
    gt_d_px = gt_d.reshape(-1)[flat_ids]
    gt_n_px = gt_n.reshape(-1, 3)[flat_ids]

    dn = (out.depth / np.maximum(out.alpha, 1e-3)).reshape(-1)[flat_ids]
    blend_derr = np.abs(dn - gt_d_px)
    top_derr = np.abs(top_t - gt_d_px)

    nm = out.normal / np.maximum(np.linalg.norm(out.normal, axis=-1, keepdims=True), 1e-9)
    nm_px = nm.reshape(-1, 3)[flat_ids]
    blend_mae = np.degrees(np.arccos(np.clip(np.sum(nm_px * gt_n_px, 1), -1, 1)))
    top_mae = np.degrees(np.arccos(np.clip(np.sum(top_n * gt_n_px, 1), -1, 1)))

    # contributor count and weight concentration
    cnt = np.bincount(c.pixel, minlength=n_pix)[flat_ids]
    conc = (best_w[flat_ids] / np.maximum(out.alpha.reshape(-1)[flat_ids], 1e-9))
    print(f"view {vi}: pixels {flat_ids.size}")
    print(f"  contributors/px med {np.median(cnt):.0f} top-weight frac med {np.median(conc):.2f}")
    print(f"  depth err med: blend {np.median(blend_derr):.4f} top {np.median(top_derr):.4f}")
    print(f"  normal MAE mean: blend {blend_mae.mean():.1f} top {top_mae.mean():.1f} "
          f"| med: blend {np.median(blend_mae):.1f} top {np.median(top_mae):.1f}")
