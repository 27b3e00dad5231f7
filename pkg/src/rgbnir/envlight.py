"""Environment lighting: lat-long radiance map, importance sampling, MIS.

Direction convention: theta = arccos(y) selects the row (+y maps to row 0),
phi = atan2(x, z) selects the column. Texel (r, c) spans theta in
[r, r+1]*pi/H and phi in [c, c+1]*2*pi/W - pi. Sampling draws a texel with
probability proportional to luminance * solid angle, then a direction
uniformly within the texel, so the reported density is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import brdf as _brdf
from .core import luminance, normalize
from .scene import GaussianScene, INFLUENCE_CUTOFF, quat_to_frames

DEFAULT_ENV_HEIGHT = 16
DEFAULT_ENV_WIDTH = 32


def dir_to_texel(height: int, width: int, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions -> continuous (row, col) in [0, H] x [0, W]."""
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    phi = np.arctan2(d[..., 0], d[..., 2])
    row = theta / np.pi * height
    col = (phi + np.pi) / (2.0 * np.pi) * width
    return row, col


def texel_to_dir(height: int, width: int, row, col) -> np.ndarray:
    """Continuous (row, col) -> unit direction (inverse of dir_to_texel)."""
    theta = np.asarray(row, dtype=np.float64) / height * np.pi
    phi = np.asarray(col, dtype=np.float64) / width * 2.0 * np.pi - np.pi
    sin_t = np.sin(theta)
    return np.stack([sin_t * np.sin(phi), np.cos(theta), sin_t * np.cos(phi)], axis=-1)


def _bilinear_indices(height: int, width: int, dirs: np.ndarray):
    """Four flat texel ids and weights per direction (rows clamped, cols wrapped)."""
    row, col = dir_to_texel(height, width, dirs)
    rf = row - 0.5
    cf = col - 0.5
    r0 = np.floor(rf).astype(np.int64)
    c0 = np.floor(cf).astype(np.int64)
    wr = rf - r0
    wc = cf - c0
    r0c = np.clip(r0, 0, height - 1)
    r1c = np.clip(r0 + 1, 0, height - 1)
    c0w = np.mod(c0, width)
    c1w = np.mod(c0 + 1, width)
    idx = np.stack([r0c * width + c0w, r0c * width + c1w,
                    r1c * width + c0w, r1c * width + c1w], axis=-1)
    wts = np.stack([(1 - wr) * (1 - wc), (1 - wr) * wc,
                    wr * (1 - wc), wr * wc], axis=-1)
    return idx, wts


class EnvironmentMap:
    """Lat-long HDR radiance map with a luminance-weighted sampling table."""

    def __init__(self, radiance: np.ndarray):
        self._radiance = None
        self._table = None
        self.set_radiance(radiance)

    @property
    def radiance(self) -> np.ndarray:
        return self._radiance

    @property
    def height(self) -> int:
        return self._radiance.shape[0]

    @property
    def width(self) -> int:
        return self._radiance.shape[1]

    def set_radiance(self, radiance: np.ndarray) -> None:
        """Replace the radiance field; invalidates the sampling table."""
        r = np.asarray(radiance, dtype=np.float64)
        if r.ndim != 3 or r.shape[2] != 3:
            raise ValueError("environment radiance must be (H, W, 3)")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("environment radiance must be finite and non-negative")
        self._radiance = r.copy()
        self._table = None

    def _build_table(self) -> None:
        h, w = self.height, self.width
        edges = np.cos(np.linspace(0.0, np.pi, h + 1))
        solid = (2.0 * np.pi / w) * (edges[:-1] - edges[1:])     # (H,) per-row texel
        lum = luminance(self._radiance)
        weight = lum * solid[:, None]
        total = weight.sum()
        if total <= 0.0:
            raise ValueError("environment map carries no light energy")
        prob = weight / total
        row_marg = prob.sum(axis=1)
        row_cdf = np.cumsum(row_marg)
        row_cdf[-1] = 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = prob / row_marg[:, None]
        cond[row_marg <= 0.0] = 1.0 / w
        col_cdf = np.cumsum(cond, axis=1)
        col_cdf[:, -1] = 1.0
        self._table = {"prob": prob, "row_cdf": row_cdf, "col_cdf": col_cdf,
                       "solid": solid, "cos_edges": edges}

    @property
    def table(self):
        if self._table is None:
            self._build_table()
        return self._table

    def eval(self, dirs: np.ndarray) -> np.ndarray:
        """Bilinear radiance lookup; dirs (..., 3) -> (..., 3)."""
        idx, wts = _bilinear_indices(self.height, self.width, dirs)
        flat = self._radiance.reshape(-1, 3)
        return np.einsum("...k,...kc->...c", wts, flat[idx])

    def pdf(self, dirs: np.ndarray) -> np.ndarray:
        """Solid-angle density of sample() at the given directions."""
        row, col = dir_to_texel(self.height, self.width, np.asarray(dirs))
        r = np.clip(np.floor(row).astype(np.int64), 0, self.height - 1)
        c = np.mod(np.floor(col).astype(np.int64), self.width)
        tab = self.table
        return tab["prob"][r, c] / tab["solid"][r]

    def sample(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Draw directions from the luminance-weighted texel distribution.

        u is (N, 2) uniforms; returns (directions (N, 3), pdf (N,)). Inverse-CDF
        remainders provide the jitter inside the chosen texel (uniform in
        cos(theta) x phi, matching the reported density exactly).
        """
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        tab = self.table
        h, w = self.height, self.width
        r = np.searchsorted(tab["row_cdf"], u[:, 0], side="right")
        r = np.clip(r, 0, h - 1)
        cdf_lo = np.where(r > 0, tab["row_cdf"][np.maximum(r - 1, 0)], 0.0)
        seg = np.maximum(tab["row_cdf"][r] - cdf_lo, 1e-300)
        du = np.clip((u[:, 0] - cdf_lo) / seg, 0.0, 1.0 - 1e-12)

        # One flat searchsorted over all row-conditional CDFs: row k occupies
        # (k, k+1] after the offset, so query u2 + r lands in the right block.
        flat_cdf = (tab["col_cdf"] + np.arange(h)[:, None]).ravel()
        c = np.searchsorted(flat_cdf, u[:, 1] + r, side="right") - r * w
        c = np.clip(c, 0, w - 1)
        rows_cdf = tab["col_cdf"][r]
        ccdf_lo = np.where(c > 0, rows_cdf[np.arange(u.shape[0]), np.maximum(c - 1, 0)], 0.0)
        cseg = np.maximum(rows_cdf[np.arange(u.shape[0]), c] - ccdf_lo, 1e-300)
        dv = np.clip((u[:, 1] - ccdf_lo) / cseg, 0.0, 1.0 - 1e-12)

        cos_hi = tab["cos_edges"][r]
        cos_lo = tab["cos_edges"][r + 1]
        cos_t = cos_hi + du * (cos_lo - cos_hi)
        sin_t = np.sqrt(np.maximum(1.0 - cos_t * cos_t, 0.0))
        phi = ((c + dv) / w) * 2.0 * np.pi - np.pi
        dirs = np.stack([sin_t * np.sin(phi), cos_t, sin_t * np.cos(phi)], axis=1)
        pdf = tab["prob"][r, c] / tab["solid"][r]
        return dirs, pdf


def constant_environment(value, height: int = DEFAULT_ENV_HEIGHT,
                         width: int = DEFAULT_ENV_WIDTH) -> EnvironmentMap:
    rad = np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)).copy()
    return EnvironmentMap(rad)


# ---------------------------------------------------------------------------
# Balance heuristic
# ---------------------------------------------------------------------------

def balance_weight(strategy: str, n_brdf: int, n_light: int, pdf_brdf, pdf_light):
    """Balance-heuristic weight w_s = N_s p_s / (N_b p_b + N_l p_l)."""
    pdf_brdf = np.asarray(pdf_brdf, dtype=np.float64)
    pdf_light = np.asarray(pdf_light, dtype=np.float64)
    denom = n_brdf * pdf_brdf + n_light * pdf_light
    if np.any(denom <= 0.0):
        raise ValueError("balance weight undefined: both strategy densities are zero")
    if strategy == "brdf":
        return n_brdf * pdf_brdf / denom
    if strategy == "light":
        return n_light * pdf_light / denom
    raise ValueError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# Visibility through the splat cloud
# ---------------------------------------------------------------------------

def visibility_many(scene: GaussianScene, origins: np.ndarray, dirs: np.ndarray,
                    t_min: float = 0.0, t_max=None) -> np.ndarray:
    """Transmittance prod(1 - opacity*influence) over all splats each ray crosses.

    Order-independent, so no sorting; crossings at t <= t_min are skipped
    (self-intersection guard for rays leaving a reconstructed surface) and,
    when ``t_max`` is given (scalar or per-ray), crossings beyond it are too
    (occluders behind a point light do not block it).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if t_max is not None:
        t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64),
                                (origins.shape[0],))
    tu, tv, nrm = quat_to_frames(scene.quat)
    scales = np.exp(scene.log_scale)
    opac = _brdf.squash01(scene.opacity_logit)
    cn = np.einsum("mj,mj->m", scene.center, nrm)
    ctu = np.einsum("mj,mj->m", scene.center, tu)
    ctv = np.einsum("mj,mj->m", scene.center, tv)
    trans = np.ones(origins.shape[0])
    chunk = max(1, int(2e6) // max(scene.count, 1))
    for s in range(0, origins.shape[0], chunk):
        o = origins[s:s + chunk]
        d = dirs[s:s + chunk]
        denom = d @ nrm.T
        wn = cn[None, :] - o @ nrm.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hit = wn / denom
            uu = (o @ tu.T - ctu[None, :] + t_hit * (d @ tu.T)) / scales[None, :, 0]
            vv = (o @ tv.T - ctv[None, :] + t_hit * (d @ tv.T)) / scales[None, :, 1]
            g_inf = np.exp(-0.5 * (uu * uu + vv * vv))
            ok = (np.abs(denom) > 1e-12) & (t_hit > t_min) & (g_inf >= INFLUENCE_CUTOFF)
            if t_max is not None:
                ok &= t_hit < t_max[s:s + chunk, None]
        a = np.where(ok, opac[None, :] * g_inf, 0.0)
        trans[s:s + chunk] = np.prod(1.0 - a, axis=1)
    return trans


def visibility(scene: GaussianScene, origin, direction, t_min: float = 0.0,
               t_max=None) -> float:
    """Single-ray transmittance; the caller offsets the origin off the surface."""
    return float(visibility_many(scene, np.asarray(origin)[None, :],
                                 np.asarray(direction)[None, :], t_min=t_min,
                                 t_max=t_max)[0])


# ---------------------------------------------------------------------------
# MIS pixel estimator
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """Per-sample pieces of the MIS sum, kept for parameter gradients.

    The estimate for point p, channel c is
        I[p, c] = sum_{s in p} factor[s] * (kd[s] * rho[p, c] + spec[s]) * l_rgb[s, c]
    so d I/d rho and d I/d (env texel) follow directly.
    """

    point: np.ndarray      # (S,) shading-point index
    factor: np.ndarray     # (S,) w_s * cos_i * V / (N_s * p_s)
    kd: np.ndarray         # (S,) diffuse factor (1 - m)/pi
    spec: np.ndarray       # (S,) specular BRDF value (channel-shared)
    l_rgb: np.ndarray      # (S, 3) incident radiance
    bilin_idx: np.ndarray  # (S, 4) flat env texel ids
    bilin_w: np.ndarray    # (S, 4) bilinear weights


def mis_points(positions: np.ndarray, normals: np.ndarray, view_dirs: np.ndarray,
               rho_rgb: np.ndarray, sigma: np.ndarray, metallic: np.ndarray,
               env: EnvironmentMap, scene: GaussianScene | None,
               n_brdf: int, n_light: int, uniforms: np.ndarray,
               t_min: float = 0.0, offset_eps: float = 1e-3,
               keep_record: bool = False):
    """Batched MIS estimate of the reflected radiance at P shading points.

    uniforms is (P, n_brdf + n_light, 2); visibility is traced against
    ``scene`` (None means unoccluded) from positions offset by ``offset_eps``
    along the normal. Returns (estimate (P, 3), SampleRecord | None).
    """
    positions = np.atleast_2d(positions)
    normals = np.atleast_2d(normals)
    view_dirs = np.atleast_2d(view_dirs)
    p_count = positions.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (p_count,))
    metallic = np.broadcast_to(np.asarray(metallic, dtype=np.float64), (p_count,))
    rho_rgb = np.broadcast_to(np.asarray(rho_rgb, dtype=np.float64), (p_count, 3))

    recs: list[tuple] = []
    estimate = np.zeros((p_count, 3))

    specs = []
    if n_brdf > 0:
        specs.append(("brdf", n_brdf, uniforms[:, :n_brdf, :]))
    if n_light > 0:
        specs.append(("light", n_light, uniforms[:, n_brdf:n_brdf + n_light, :]))

    for strategy, n_s, u_blk in specs:
        pt = np.repeat(np.arange(p_count), n_s)
        u_flat = u_blk.reshape(-1, 2)
        o_r = view_dirs[pt]
        n_r = normals[pt]
        sg = sigma[pt]
        mt = metallic[pt]
        if strategy == "brdf":
            dirs, p_b = _brdf.sample_directions(o_r, n_r, sg, mt, u_flat)
            p_l = env.pdf(dirs)
            p_self = p_b
        else:
            dirs, p_l = env.sample(u_flat)
            p_b = _brdf.pdf_directions(o_r, n_r, sg, mt, dirs)
            p_self = p_l
        ci = np.einsum("sj,sj->s", dirs, n_r)
        live = (p_self > 0.0) & (ci > 0.0)
        denom = n_brdf * p_b + n_light * p_l
        live &= denom > 0.0
        w_s = np.where(live, n_s * p_self / np.maximum(denom, 1e-300), 0.0)

        vis = np.ones(dirs.shape[0])
        if scene is not None and np.any(live):
            idx = np.flatnonzero(live)
            org = positions[pt[idx]] + offset_eps * normals[pt[idx]]
            vis[idx] = visibility_many(scene, org, dirs[idx], t_min=t_min)
        factor = np.where(live, w_s * ci * vis / (n_s * np.maximum(p_self, 1e-300)), 0.0)

        keep = factor != 0.0
        if not np.any(keep):
            continue
        dirs_k = dirs[keep]
        pt_k = pt[keep]
        h = normalize(dirs_k + view_dirs[pt_k])
        ch = np.einsum("sj,sj->s", n_r[keep], h)
        coh = np.einsum("sj,sj->s", view_dirs[pt_k], h)
        co = np.einsum("sj,sj->s", view_dirs[pt_k], n_r[keep])
        # rho = 1 makes the diffuse part equal to the bare (1 - m)/pi factor.
        kd, spec = _brdf.eval_parts_cosines(1.0, sigma[pt_k], metallic[pt_k],
                                            ci[keep], co, ch, coh)

        idxs, wts = _bilinear_indices(env.height, env.width, dirs_k)
        l_rgb = np.einsum("sk,skc->sc", wts, env.radiance.reshape(-1, 3)[idxs])

        fac = factor[keep]
        f_rgb = kd[:, None] * rho_rgb[pt_k] + spec[:, None]
        np.add.at(estimate, pt_k, fac[:, None] * f_rgb * l_rgb)
        if keep_record:
            recs.append((pt_k, fac, kd, spec, l_rgb, idxs, wts))

    record = None
    if keep_record:
        if recs:
            record = SampleRecord(point=np.concatenate([r[0] for r in recs]),
                                  factor=np.concatenate([r[1] for r in recs]),
                                  kd=np.concatenate([r[2] for r in recs]),
                                  spec=np.concatenate([r[3] for r in recs]),
                                  l_rgb=np.concatenate([r[4] for r in recs]),
                                  bilin_idx=np.concatenate([r[5] for r in recs]),
                                  bilin_w=np.concatenate([r[6] for r in recs]))
        else:
            record = SampleRecord(point=np.zeros(0, dtype=np.int64),
                                  factor=np.zeros(0), kd=np.zeros(0),
                                  spec=np.zeros(0), l_rgb=np.zeros((0, 3)),
                                  bilin_idx=np.zeros((0, 4), dtype=np.int64),
                                  bilin_w=np.zeros((0, 4)))
    return estimate, record


def mis_pixel(position, normal, view_dir, surface: _brdf.SurfaceBRDF,
              env: EnvironmentMap, scene: GaussianScene | None,
              n_brdf: int, n_light: int, rng: np.random.Generator,
              t_min: float = 0.0) -> np.ndarray:
    """Multiple-importance-sampled RGB radiance estimate for one shading point."""
    if n_brdf < 0 or n_light < 0 or n_brdf + n_light == 0:
        raise ValueError("sample counts must be non-negative and not both zero")
    u = rng.random((1, n_brdf + n_light, 2))
    est, _ = mis_points(np.asarray(position, dtype=np.float64)[None, :],
                        np.asarray(normal, dtype=np.float64)[None, :],
                        np.asarray(view_dir, dtype=np.float64)[None, :],
                        surface.albedo[:3][None, :], surface.roughness,
                        surface.metallic, env, scene, n_brdf, n_light, u,
                        t_min=t_min)
    return est[0]
