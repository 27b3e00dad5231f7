"""Differentiable splat rasterizer.

Forward: per-pixel front-to-back alpha blending of ray/plane intersections,
    I = sum_i T_i alpha_i R_i,   T_i = prod_{j<i} (1 - alpha_j),
with alpha_i = opacity_i * exp(-(u^2 + v^2)/2) from the exact intersection.
Sorting uses splat-center depth (global per camera, stable ties by index);
shading and the depth map use the exact per-ray t. Influence below
INFLUENCE_CUTOFF is skipped and accumulation stops once T < T_STOP; the
backward pass differentiates exactly that truncated sum.

Backward: reverse-mode gradients from image/alpha/depth/normal-map adjoints
to raw splat parameters (center, quaternion, log scales, opacity logit) and
to the per-splat radiance values, using the retained contributor lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, pixel_rays
from .scene import (GaussianScene, INFLUENCE_CUTOFF, depth_sort,
                    quat_frame_jacobians, quat_raw_chain, quat_to_frames)
from . import brdf as _brdf

# Transmittance early-stop threshold.
T_STOP = 1e-4
# Alpha-map floor used when normalizing attribute maps.
ALPHA_NORM_MIN = 1e-3

_PIXEL_CHUNK = 2048


@dataclass
class Contributors:
    """Flat per-(pixel, splat) records in compositing order within each pixel."""

    pixel: np.ndarray   # (K,) flattened pixel index
    gauss: np.ndarray   # (K,) splat index into the scene
    t: np.ndarray       # (K,) ray parameter of the exact intersection
    u: np.ndarray       # (K,) splat-local coordinates
    v: np.ndarray
    alpha: np.ndarray   # (K,) opacity * influence
    trans: np.ndarray   # (K,) transmittance in front of this contributor
    sign: np.ndarray    # (K,) +/-1 normal flip toward the camera

    @property
    def count(self) -> int:
        return int(self.pixel.shape[0])


@dataclass
class RenderOutput:
    image: np.ndarray          # (H, W, C)
    alpha: np.ndarray          # (H, W)
    depth: np.ndarray          # (H, W) alpha-weighted blend of t
    normal: np.ndarray         # (H, W, 3) alpha-weighted blend of flipped normals
    contributors: Contributors
    camera: Camera
    scene_version: int
    radiance: np.ndarray       # (M, C) values used in the forward pass


def _segment_starts(pixel_ids: np.ndarray) -> np.ndarray:
    if pixel_ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.r_[True, pixel_ids[1:] != pixel_ids[:-1]])


def segment_suffix_excl(values: np.ndarray, pixel_ids: np.ndarray) -> np.ndarray:
    """Per entry, the sum of later entries within the same pixel segment.

    ``pixel_ids`` must be sorted; values may carry trailing axes.
    """
    if values.shape[0] == 0:
        return np.zeros_like(values)
    starts = _segment_starts(pixel_ids)
    counts = np.diff(np.r_[starts, pixel_ids.shape[0]])
    cs = np.cumsum(values, axis=0)
    base = np.zeros_like(np.take(cs, starts, axis=0))
    nz = starts > 0
    base[nz] = cs[starts[nz] - 1]
    prefix_incl = cs - np.repeat(base, counts, axis=0)
    seg_total = np.add.reduceat(values, starts, axis=0)
    return np.repeat(seg_total, counts, axis=0) - prefix_incl


def rasterize(scene: GaussianScene, camera: Camera, radiance: np.ndarray) -> RenderOutput:
    """Composite per-splat radiance (M, C) into an image; retains contributors."""
    radiance = np.asarray(radiance, dtype=np.float64)
    if radiance.ndim != 2 or radiance.shape[0] != scene.count:
        raise ValueError("radiance must be (count, channels)")
    n_chan = radiance.shape[1]
    h, w = camera.height, camera.width
    n_pix = h * w

    order = depth_sort(scene, camera)
    mv = order.shape[0]
    image = np.zeros((n_pix, n_chan))
    alpha_map = np.zeros(n_pix)
    depth_map = np.zeros(n_pix)
    normal_map = np.zeros((n_pix, 3))
    parts: list[tuple] = []

    if mv > 0:
        tu, tv, nrm = quat_to_frames(scene.quat[order])
        centers = scene.center[order]
        scales = np.exp(scene.log_scale[order])
        opac = _brdf.squash01(scene.opacity_logit[order])
        rad_sorted = radiance[order]

        origin, dirs = pixel_rays(camera)
        w_vec = centers - origin                      # (Mv, 3)
        wn = np.einsum("mj,mj->m", w_vec, nrm)        # (Mv,)
        au = -np.einsum("mj,mj->m", w_vec, tu)
        av = -np.einsum("mj,mj->m", w_vec, tv)

        for start in range(0, n_pix, _PIXEL_CHUNK):
            d = dirs[start:start + _PIXEL_CHUNK]      # (P, 3)
            denom = d @ nrm.T                         # (P, Mv)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hit = wn[None, :] / denom
                btu = d @ tu.T
                btv = d @ tv.T
                uu = (au[None, :] + t_hit * btu) / scales[None, :, 0]
                vv = (av[None, :] + t_hit * btv) / scales[None, :, 1]
                g_inf = np.exp(-0.5 * (uu * uu + vv * vv))
                valid = (np.abs(denom) > 1e-12) & (t_hit > 0.0) & (g_inf >= INFLUENCE_CUTOFF)
                a = np.where(valid, opac[None, :] * g_inf, 0.0)
            valid &= a > 0.0
            one_minus = np.cumprod(1.0 - a, axis=1)
            trans = np.concatenate([np.ones((a.shape[0], 1)), one_minus[:, :-1]], axis=1)
            include = valid & (trans >= T_STOP)
            wgt = np.where(include, trans * a, 0.0)

            alpha_map[start:start + d.shape[0]] = wgt.sum(axis=1)
            image[start:start + d.shape[0]] = wgt @ rad_sorted
            depth_map[start:start + d.shape[0]] = (wgt * np.where(include, t_hit, 0.0)).sum(axis=1)
            sign = np.where(denom > 0.0, -1.0, 1.0)
            normal_map[start:start + d.shape[0]] = (wgt * sign) @ nrm

            pi, sl = np.nonzero(include)
            parts.append((pi + start, sl, t_hit[pi, sl], uu[pi, sl], vv[pi, sl],
                          a[pi, sl], trans[pi, sl], sign[pi, sl]))

    if parts:
        pix = np.concatenate([p[0] for p in parts])
        slot = np.concatenate([p[1] for p in parts])
        contribs = Contributors(pixel=pix, gauss=order[slot],
                                t=np.concatenate([p[2] for p in parts]),
                                u=np.concatenate([p[3] for p in parts]),
                                v=np.concatenate([p[4] for p in parts]),
                                alpha=np.concatenate([p[5] for p in parts]),
                                trans=np.concatenate([p[6] for p in parts]),
                                sign=np.concatenate([p[7] for p in parts]))
    else:
        z = np.zeros(0)
        contribs = Contributors(pixel=np.zeros(0, dtype=np.int64),
                                gauss=np.zeros(0, dtype=np.int64),
                                t=z, u=z, v=z, alpha=z, trans=z, sign=z)

    return RenderOutput(image=image.reshape(h, w, n_chan),
                        alpha=alpha_map.reshape(h, w),
                        depth=depth_map.reshape(h, w),
                        normal=normal_map.reshape(h, w, 3),
                        contributors=contribs, camera=camera,
                        scene_version=scene.version, radiance=radiance)


def backward(scene: GaussianScene, output: RenderOutput,
             grad_image: np.ndarray | None = None,
             grad_alpha: np.ndarray | None = None,
             grad_depth: np.ndarray | None = None,
             grad_normal: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the truncated compositing sum.

    Returns gradients for 'radiance' (M, C) and the raw geometric parameters
    'center', 'quat', 'log_scale', 'opacity_logit'. Raises if the scene was
    mutated after the forward pass (stale contributor lists).
    """
    if output.scene_version != scene.version:
        raise RuntimeError("stale contributor lists: scene changed since the forward pass")
    c = output.contributors
    m, n_chan = output.radiance.shape
    grads = {"radiance": np.zeros((m, n_chan)), "center": np.zeros((m, 3)),
             "quat": np.zeros((m, 4)), "log_scale": np.zeros((m, 2)),
             "opacity_logit": np.zeros(m)}
    if c.count == 0:
        return grads

    cam = output.camera
    origin, dirs = pixel_rays(cam)
    d_k = dirs[c.pixel]                                # (K, 3)
    tu_all, tv_all, n_all = quat_to_frames(scene.quat)
    tu_k, tv_k, n_k = tu_all[c.gauss], tv_all[c.gauss], n_all[c.gauss]
    scales = np.exp(scene.log_scale)
    su_k = scales[c.gauss, 0]
    sv_k = scales[c.gauss, 1]
    opac = _brdf.squash01(scene.opacity_logit)
    op_k = opac[c.gauss]
    r_k = output.radiance[c.gauss]                     # (K, C)

    gi = (np.zeros((0, n_chan)) if grad_image is None
          else np.asarray(grad_image, dtype=np.float64).reshape(-1, n_chan)[c.pixel])
    ga = (None if grad_alpha is None
          else np.asarray(grad_alpha, dtype=np.float64).reshape(-1)[c.pixel])
    gd = (None if grad_depth is None
          else np.asarray(grad_depth, dtype=np.float64).reshape(-1)[c.pixel])
    gn = (None if grad_normal is None
          else np.asarray(grad_normal, dtype=np.float64).reshape(-1, 3)[c.pixel])

    # y_k: adjoint of the per-contributor blended value T_k alpha_k y_k.
    y = np.zeros(c.count)
    if grad_image is not None:
        y += np.einsum("kc,kc->k", gi, r_k)
        np.add.at(grads["radiance"], c.gauss, (c.trans * c.alpha)[:, None] * gi)
    if ga is not None:
        y += ga
    if gd is not None:
        y += gd * c.t
    if gn is not None:
        y += c.sign * np.einsum("kj,kj->k", gn, n_k)

    # d L / d alpha_k = T_k y_k - (sum of later weighted values) / (1 - alpha_k)
    suffix = segment_suffix_excl(c.trans * c.alpha * y, c.pixel)
    one_minus = 1.0 - c.alpha
    g_alpha_k = c.trans * y - np.where(one_minus > 1e-12, suffix / np.maximum(one_minus, 1e-12), 0.0)

    g_inf = np.exp(-0.5 * (c.u * c.u + c.v * c.v))     # influence value
    g_op = g_alpha_k * g_inf                           # d/d opacity
    np.add.at(grads["opacity_logit"], c.gauss, g_op * op_k * (1.0 - op_k))

    # influence = exp(-(u^2+v^2)/2): dG/du = -u G
    g_g = g_alpha_k * op_k                             # d/d influence
    g_u = g_g * (-c.u) * g_inf
    g_v = g_g * (-c.v) * g_inf

    # Geometry chain. q_loc = hit - center; denom = d . n.
    denom = np.einsum("kj,kj->k", d_k, n_k)
    q_loc = origin + c.t[:, None] * d_k - scene.center[c.gauss]
    btu = np.einsum("kj,kj->k", d_k, tu_k)
    btv = np.einsum("kj,kj->k", d_k, tv_k)

    # Direct t adjoint (depth map) plus t-dependence of u and v.
    g_t = np.zeros(c.count)
    if gd is not None:
        g_t += c.trans * c.alpha * gd
    g_t += g_u * btu / su_k + g_v * btv / sv_k

    inv_den = 1.0 / denom
    # d t/d center = n/denom ; d t/d n = -q_loc/denom
    g_center = (g_t * inv_den)[:, None] * n_k
    g_center += g_u[:, None] * (-tu_k) / su_k[:, None]
    g_center += g_v[:, None] * (-tv_k) / sv_k[:, None]

    g_n_vec = (g_t * inv_den)[:, None] * (-q_loc)
    if gn is not None:
        g_n_vec += (c.trans * c.alpha * c.sign)[:, None] * gn
    g_tu_vec = (g_u / su_k)[:, None] * q_loc
    g_tv_vec = (g_v / sv_k)[:, None] * q_loc

    # log-scale: du/d log su = -u
    g_ls = np.stack([g_u * (-c.u), g_v * (-c.v)], axis=1)

    np.add.at(grads["center"], c.gauss, g_center)
    np.add.at(grads["log_scale"], c.gauss, g_ls)

    # Tangent-frame vectors -> unit quaternion -> raw quaternion.
    j_tu, j_tv, j_n = quat_frame_jacobians(scene.quat)
    g_quat_unit = np.zeros((m, 4))
    for vec, jac in ((g_tu_vec, j_tu), (g_tv_vec, j_tv), (g_n_vec, j_n)):
        contrib = np.einsum("kj,kjp->kp", vec, jac[c.gauss])
        np.add.at(g_quat_unit, c.gauss, contrib)
    grads["quat"] = quat_raw_chain(scene.quat, g_quat_unit)
    return grads


# ---------------------------------------------------------------------------
# Attribute rendering (deferred-shading inputs)
# ---------------------------------------------------------------------------

@dataclass
class AttributeMaps:
    """Alpha-normalized splat-attribute maps plus shading geometry per pixel."""

    alpha: np.ndarray        # (H, W)
    position: np.ndarray     # (H, W, 3) blended hit points
    normal: np.ndarray       # (H, W, 3) unit where alpha > 0
    albedo_rgb: np.ndarray   # (H, W, 3)
    rho_nir: np.ndarray      # (H, W)
    sigma: np.ndarray        # (H, W)
    metallic: np.ndarray     # (H, W)
    depth: np.ndarray        # (H, W) alpha-normalized ray parameter
    contributors: Contributors
    weights: np.ndarray      # (K,) T*alpha/alpha_pixel, zero where alpha < floor


def rasterize_attributes(scene: GaussianScene, camera: Camera) -> AttributeMaps:
    """Render reflectance attributes through the compositing weights.

    Requires the cross-spectral transfer to have cached collapsed values
    (stage tag 'transferred' or later); maps are divided by the alpha map
    where it exceeds ALPHA_NORM_MIN.
    """
    if scene.collapsed_sigma is None:
        raise ValueError("scene has no collapsed reflectance; run the transfer first")
    attrs = np.concatenate([scene.albedo_rgb,
                            scene.collapsed_rho_nir[:, None],
                            scene.collapsed_sigma[:, None],
                            scene.collapsed_m[:, None]], axis=1)
    out = rasterize(scene, camera, attrs)
    alpha = out.alpha
    safe = np.maximum(alpha, ALPHA_NORM_MIN)
    norm = out.image / safe[..., None]
    nrm_len = np.linalg.norm(out.normal, axis=2, keepdims=True)
    unit_normal = out.normal / np.maximum(nrm_len, 1e-12)
    depth_n = out.depth / safe
    origin, dirs = pixel_rays(camera)
    position = origin[None, None, :] + depth_n[..., None] * dirs.reshape(
        camera.height, camera.width, 3)
    c = out.contributors
    weights = c.trans * c.alpha / safe.reshape(-1)[c.pixel]
    return AttributeMaps(alpha=alpha, position=position, normal=unit_normal,
                         albedo_rgb=norm[..., 0:3], rho_nir=norm[..., 3],
                         sigma=norm[..., 4], metallic=norm[..., 5],
                         depth=depth_n, contributors=c, weights=weights)
