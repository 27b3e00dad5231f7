"""Analytic reference scenes and a quadrature renderer.

This module is the ground-truth side of every dual-route check: surfaces are
exact spheres, boxes and rectangles, visibility is exact ray casting, and
hemisphere integrals use Gauss-Legendre (in cos theta) times a uniform phi
rule. It deliberately shares nothing with the splat rasterizer or the Monte
Carlo estimator except the point BRDF model itself; even the environment
lookup is re-implemented here on the raw (H, W, 3) array.

Also hosts the synthetic capture generator, which writes datasets in the
layout understood by :mod:`rgbnir.dataset` together with a ground-truth
bundle (per-view normal/depth/reflectance maps plus the environment).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as _dataset
from .brdf import SurfaceBRDF, eval_many, unsquash01
from .core import Camera, FlashModel, look_at_camera, luminance, pixel_rays
from .scene import GaussianScene, SH_COEFF_COUNT, fibonacci_sphere, rotmat_to_quat

# Minimum ray parameter; doubles as the shadow-ray offset.
RAY_EPS = 1e-6

# NIR captures are snapped to this grid so flash on/off differencing is exact
# in 32-bit storage (any multiple of 2^-16 below 2^8 is a float32 value).
NIR_QUANTUM = 2.0 ** -16


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

@dataclass
class Sphere:
    """Analytic sphere, optionally split into two materials by a plane
    through the center (``material_back`` where (p - center) . split < 0)."""

    center: np.ndarray
    radius: float
    material: SurfaceBRDF
    material_back: SurfaceBRDF | None = None
    split: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.split = np.asarray(self.split, dtype=np.float64).reshape(3)
        if self.radius <= 0.0:
            raise ValueError("sphere radius must be positive")


@dataclass
class Rectangle:
    """Finite two-sided rectangle spanned by orthogonal half-extent vectors."""

    center: np.ndarray
    half_u: np.ndarray
    half_v: np.ndarray
    material: SurfaceBRDF

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_u = np.asarray(self.half_u, dtype=np.float64).reshape(3)
        self.half_v = np.asarray(self.half_v, dtype=np.float64).reshape(3)
        if abs(np.dot(self.half_u, self.half_v)) > 1e-9:
            raise ValueError("rectangle axes must be orthogonal")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.half_u, self.half_v)
        return n / np.linalg.norm(n)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    material: SurfaceBRDF

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.hi > self.lo):
            raise ValueError("box must have positive extent on every axis")


def _solid_overlap(a, b) -> bool:
    if isinstance(a, Sphere) and isinstance(b, Sphere):
        return np.linalg.norm(a.center - b.center) < a.radius + b.radius
    if isinstance(a, Sphere) and isinstance(b, Box):
        closest = np.clip(a.center, b.lo, b.hi)
        return np.linalg.norm(closest - a.center) < a.radius
    if isinstance(a, Box) and isinstance(b, Sphere):
        return _solid_overlap(b, a)
    if isinstance(a, Box) and isinstance(b, Box):
        return bool(np.all(a.hi > b.lo) and np.all(b.hi > a.lo))
    return False  # rectangles have no volume


@dataclass
class AnalyticScene:
    """Primitives plus RGB environment, a constant ambient NIR level, and the
    (camera-mounted) flash used when capturing it."""

    primitives: list
    env: np.ndarray
    nir_ambient: float = 0.0
    flash: FlashModel | None = None

    def __post_init__(self) -> None:
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        self.env = np.asarray(self.env, dtype=np.float64)
        if self.env.ndim != 3 or self.env.shape[2] != 3:
            raise ValueError("environment must be (H, W, 3)")
        if not np.all(np.isfinite(self.env)) or np.any(self.env < 0.0):
            raise ValueError("environment radiance must be finite and non-negative")
        if self.nir_ambient < 0.0:
            raise ValueError("ambient NIR level cannot be negative")
        for i, a in enumerate(self.primitives):
            for b in self.primitives[i + 1:]:
                if _solid_overlap(a, b):
                    raise ValueError("primitives overlap; scene is ambiguous")


# ---------------------------------------------------------------------------
# Ray casting (vectorized over rays; loops only over primitives)
# ---------------------------------------------------------------------------

def _isect_sphere(pr: Sphere, origins, dirs):
    oc = origins - pr.center
    b = np.einsum("pj,pj->p", oc, dirs)
    c0 = np.einsum("pj,pj->p", oc, oc) - pr.radius * pr.radius
    disc = b * b - c0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    t = np.where(t_near > RAY_EPS, t_near, np.where(t_far > RAY_EPS, t_far, np.inf))
    return np.where(disc > 0.0, t, np.inf)


def _isect_rect(pr: Rectangle, origins, dirs):
    n = pr.normal
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((pr.center - origins) @ n) / denom
    q = origins + t[:, None] * dirs - pr.center
    lu2 = np.dot(pr.half_u, pr.half_u)
    lv2 = np.dot(pr.half_v, pr.half_v)
    a = (q @ pr.half_u) / lu2
    b = (q @ pr.half_v) / lv2
    ok = (np.abs(denom) > 1e-12) & (t > RAY_EPS) & (np.abs(a) <= 1.0) & (np.abs(b) <= 1.0)
    return np.where(ok, t, np.inf)


def _isect_box(pr: Box, origins, dirs):
    safe = np.where(np.abs(dirs) < 1e-18, np.copysign(1e-18, dirs + 1e-300), dirs)
    inv = 1.0 / safe
    t0 = (pr.lo - origins) * inv
    t1 = (pr.hi - origins) * inv
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    t = np.where(t_near > RAY_EPS, t_near, t_far)
    ok = (t_far > np.maximum(t_near, RAY_EPS)) & (t > RAY_EPS)
    return np.where(ok, t, np.inf)


def _isect_any(prim, origins, dirs):
    if isinstance(prim, Sphere):
        return _isect_sphere(prim, origins, dirs)
    if isinstance(prim, Rectangle):
        return _isect_rect(prim, origins, dirs)
    if isinstance(prim, Box):
        return _isect_box(prim, origins, dirs)
    raise TypeError(f"unsupported primitive {type(prim).__name__}")


def scene_intersect(scene: AnalyticScene, origins, dirs):
    """Closest hit per ray: (t, primitive index); misses get (inf, -1)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if origins.shape[0] == 1 and dirs.shape[0] > 1:
        origins = np.broadcast_to(origins, dirs.shape)
    best_t = np.full(dirs.shape[0], np.inf)
    best_i = np.full(dirs.shape[0], -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        t = _isect_any(prim, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, k, best_i)
    return best_t, best_i


def occluded(scene: AnalyticScene, points, dirs, t_max=None) -> np.ndarray:
    """Boolean any-hit along rays offset by RAY_EPS (analytic surfaces are opaque)."""
    points = np.atleast_2d(points)
    dirs = np.atleast_2d(dirs)
    blocked = np.zeros(dirs.shape[0], dtype=bool)
    limit = None if t_max is None else np.asarray(t_max, dtype=np.float64) - RAY_EPS
    for prim in scene.primitives:
        t = _isect_any(prim, points, dirs)
        hit = np.isfinite(t)
        if limit is not None:
            hit &= t < limit
        blocked |= hit
    return blocked


def surface_normals(scene: AnalyticScene, prim_idx, points, dirs):
    """Geometric normals at hit points, oriented toward the incoming ray."""
    normals = np.zeros_like(points)
    for k, prim in enumerate(scene.primitives):
        sel = prim_idx == k
        if not np.any(sel):
            continue
        if isinstance(prim, Sphere):
            n = (points[sel] - prim.center) / prim.radius
        elif isinstance(prim, Rectangle):
            n = np.broadcast_to(prim.normal, points[sel].shape).copy()
        else:  # Box: face of smallest distance to the hit point
            p = points[sel]
            d_faces = np.concatenate([p - prim.lo, prim.hi - p], axis=1)  # (S, 6)
            face = np.argmin(np.abs(d_faces), axis=1)
            table = np.array([[-1, 0, 0], [0, -1, 0], [0, 0, -1],
                              [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
            n = table[face]
        flip = np.einsum("sj,sj->s", n, dirs[sel]) > 0.0
        n[flip] *= -1.0
        normals[sel] = n
    return normals


def surface_materials(scene: AnalyticScene, prim_idx, points):
    """Per-hit (albedo (P, 4), roughness (P,), metallic (P,))."""
    count = points.shape[0]
    albedo = np.zeros((count, 4))
    rough = np.full(count, 0.5)
    metal = np.zeros(count)
    for k, prim in enumerate(scene.primitives):
        sel = prim_idx == k
        if not np.any(sel):
            continue
        mat = prim.material
        if isinstance(prim, Sphere) and prim.material_back is not None:
            side = (points[sel] - prim.center) @ prim.split >= 0.0
            for mask_side, m in ((side, prim.material), (~side, prim.material_back)):
                idx = np.flatnonzero(sel)[mask_side]
                albedo[idx] = m.albedo
                rough[idx] = m.roughness
                metal[idx] = m.metallic
        else:
            albedo[sel] = mat.albedo
            rough[sel] = mat.roughness
            metal[sel] = mat.metallic
    return albedo, rough, metal


# ---------------------------------------------------------------------------
# Environment lookup (independent bilinear implementation)
# ---------------------------------------------------------------------------

def env_lookup(env: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear lat-long lookup. Convention: theta = arccos(y), phi = atan2(x, z),
    texel centers at (r + 0.5, c + 0.5); rows clamp at the poles, columns wrap.
    """
    env = np.asarray(env, dtype=np.float64)
    h, w = env.shape[:2]
    d = np.asarray(dirs, dtype=np.float64)
    row = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi * h - 0.5
    col = (np.arctan2(d[..., 0], d[..., 2]) + np.pi) / (2.0 * np.pi) * w - 0.5
    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0
    flat = env.reshape(h * w, 3)
    out = np.zeros(d.shape[:-1] + (3,))
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = np.clip(r0 + dr, 0, h - 1)
        cc = np.mod(c0 + dc, w)
        out += wt[..., None] * flat[rr * w + cc]
    return out


def texel_center_dirs(height: int, width: int) -> np.ndarray:
    """(H, W, 3) unit directions through lat-long texel centers."""
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * 2.0 * np.pi - np.pi
    st = np.sin(theta)[:, None]
    return np.stack([st * np.sin(phi)[None, :],
                     np.broadcast_to(np.cos(theta)[:, None], (height, width)),
                     st * np.cos(phi)[None, :]], axis=-1)


def texel_solid_angles(height: int, width: int) -> np.ndarray:
    """(H,) exact solid angle of one texel in each row."""
    edges = np.cos(np.linspace(0.0, np.pi, height + 1))
    return (2.0 * np.pi / width) * (edges[:-1] - edges[1:])


# ---------------------------------------------------------------------------
# Quadrature shading
# ---------------------------------------------------------------------------

def hemisphere_nodes(n_theta: int, n_phi: int):
    """Gauss-Legendre nodes in mu = cos(theta) on [0, 1] and uniform phi.

    Returns (mu (T,), w_mu (T,), phi (F,), w_phi scalar); the hemisphere
    integral of g is sum_ij w_mu[i] * w_phi * g(mu_i, phi_j).
    """
    x, w = np.polynomial.legendre.leggauss(n_theta)
    mu = 0.5 * (x + 1.0)
    w_mu = 0.5 * w
    phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
    return mu, w_mu, phi, 2.0 * np.pi / n_phi


def _tangent_frames(normals: np.ndarray):
    """Vectorized orthonormal tangent basis per normal."""
    n = np.asarray(normals, dtype=np.float64)
    a = np.where(np.abs(n[:, 1:2]) < 0.9, np.array([[0.0, 1.0, 0.0]]),
                 np.array([[1.0, 0.0, 0.0]]))
    t1 = np.cross(a, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def quadrature_radiance(scene: AnalyticScene, positions, normals, view_dirs,
                        albedo, roughness, metallic, n_theta: int = 32,
                        n_phi: int = 64, shadows: bool = True,
                        chunk: int = 128) -> np.ndarray:
    """Reflected (R, G, B, NIR) radiance at P surface points under the scene's
    environment plus the constant ambient NIR field.

    ``view_dirs`` point from the surface toward the viewer. The integrand is
    env * f * cos with exact shadow rays; the environment sits at infinity.
    """
    positions = np.atleast_2d(positions)
    normals = np.atleast_2d(normals)
    view_dirs = np.atleast_2d(view_dirs)
    albedo = np.atleast_2d(albedo)
    p_count = positions.shape[0]
    roughness = np.broadcast_to(np.asarray(roughness, dtype=np.float64), (p_count,))
    metallic = np.broadcast_to(np.asarray(metallic, dtype=np.float64), (p_count,))

    mu, w_mu, phi, w_phi = hemisphere_nodes(n_theta, n_phi)
    sin_t = np.sqrt(np.maximum(1.0 - mu * mu, 0.0))
    # Local-frame node directions, shared by every shading point.
    local = np.stack(np.broadcast_arrays(
        (sin_t[:, None] * np.cos(phi)[None, :]),
        (sin_t[:, None] * np.sin(phi)[None, :]),
        np.broadcast_to(mu[:, None], (n_theta, n_phi))), axis=-1).reshape(-1, 3)
    node_w = (w_mu[:, None] * w_phi * np.broadcast_to(mu[:, None], (n_theta, n_phi))).reshape(-1)
    s_count = local.shape[0]

    out = np.zeros((p_count, 4))
    for lo in range(0, p_count, chunk):
        hi = min(lo + chunk, p_count)
        n_c = normals[lo:hi]
        t1, t2 = _tangent_frames(n_c)
        dirs = (local[None, :, 0:1] * t1[:, None, :]
                + local[None, :, 1:2] * t2[:, None, :]
                + local[None, :, 2:3] * n_c[:, None, :])   # (C, S, 3)
        radiance = np.empty((hi - lo, s_count, 4))
        radiance[:, :, :3] = env_lookup(scene.env, dirs)
        radiance[:, :, 3] = scene.nir_ambient
        if shadows:
            org = np.repeat(positions[lo:hi] + RAY_EPS * n_c, s_count, axis=0)
            blocked = occluded(scene, org, dirs.reshape(-1, 3))
            radiance[blocked.reshape(hi - lo, s_count)] = 0.0
        f = eval_many(albedo[lo:hi, None, :], roughness[lo:hi, None],
                      metallic[lo:hi, None], dirs, view_dirs[lo:hi, None, :],
                      n_c[:, None, :])                     # (C, S, 4)
        out[lo:hi] = np.einsum("s,csk->ck", node_w, radiance * f)
    return out


def point_light_radiance(scene: AnalyticScene, positions, normals, view_dirs,
                         albedo, roughness, metallic, light_pos, intensity,
                         shadows: bool = True) -> np.ndarray:
    """Direct reflected radiance from an isotropic point light (per channel)."""
    positions = np.atleast_2d(positions)
    normals = np.atleast_2d(normals)
    view_dirs = np.atleast_2d(view_dirs)
    albedo = np.atleast_2d(albedo)
    to_l = np.asarray(light_pos, dtype=np.float64) - positions
    dist = np.linalg.norm(to_l, axis=1)
    i = to_l / dist[:, None]
    irr = intensity / (dist * dist)
    ci = np.maximum(np.einsum("pj,pj->p", i, normals), 0.0)
    vis = np.ones(positions.shape[0])
    if shadows:
        vis[occluded(scene, positions + RAY_EPS * normals, i, t_max=dist)] = 0.0
    f = eval_many(albedo, roughness, metallic, i, view_dirs, normals)
    return (irr * ci * vis)[:, None] * f


# ---------------------------------------------------------------------------
# Reference renderer
# ---------------------------------------------------------------------------

def quantize_nir(image: np.ndarray) -> np.ndarray:
    """Snap to the NIR storage grid (multiples of 2^-16, exact in float32)."""
    return np.round(np.asarray(image, dtype=np.float64) / NIR_QUANTUM) * NIR_QUANTUM


def render_reference(scene: AnalyticScene, camera: Camera,
                     flash: FlashModel | None = None, n_theta: int = 32,
                     n_phi: int = 64, shadows: bool = True) -> dict[str, np.ndarray]:
    """Render every reference product for one view.

    Returns a dict with 'rgb' (env-lit, environment visible in the
    background), 'nir_on'/'nir_off'/'nir_flash' (flash-only NIR is zero when
    no flash is given), 'mask', and ground-truth 'normal', 'depth',
    'albedo_rgb', 'albedo_nir', 'roughness', 'metallic' maps.
    """
    if flash is None:
        flash = scene.flash
    h, w = camera.height, camera.width
    origin, dirs = pixel_rays(camera)
    t, prim = scene_intersect(scene, origin[None, :], dirs)
    hit = np.isfinite(t)

    rgb = env_lookup(scene.env, dirs)
    nir_off = np.full(dirs.shape[0], scene.nir_ambient)
    nir_flash = np.zeros(dirs.shape[0])
    normal_map = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    alb_rgb = np.zeros((h * w, 3))
    alb_nir = np.zeros(h * w)
    rough_map = np.zeros(h * w)
    metal_map = np.zeros(h * w)

    if np.any(hit):
        idx = np.flatnonzero(hit)
        pts = origin + t[idx, None] * dirs[idx]
        nrm = surface_normals(scene, prim[idx], pts, dirs[idx])
        alb, rough, metal = surface_materials(scene, prim[idx], pts)
        view = -dirs[idx]
        shaded = quadrature_radiance(scene, pts, nrm, view, alb, rough, metal,
                                     n_theta=n_theta, n_phi=n_phi, shadows=shadows)
        rgb[idx] = shaded[:, :3]
        nir_off[idx] = shaded[:, 3]
        if flash is not None:
            r_fl = point_light_radiance(scene, pts, nrm, view, alb, rough, metal,
                                        flash.position_world(camera),
                                        flash.intensity, shadows=shadows)
            nir_flash[idx] = r_fl[:, 3]
        normal_map[idx] = nrm
        depth[idx] = t[idx]
        alb_rgb[idx] = alb[:, :3]
        alb_nir[idx] = alb[:, 3]
        rough_map[idx] = rough
        metal_map[idx] = metal

    nir_off = quantize_nir(nir_off)
    nir_flash = quantize_nir(nir_flash)
    return {"rgb": rgb.reshape(h, w, 3),
            "nir_on": (nir_off + nir_flash).reshape(h, w),
            "nir_off": nir_off.reshape(h, w),
            "nir_flash": nir_flash.reshape(h, w),
            "mask": hit.astype(np.float64).reshape(h, w),
            "normal": normal_map.reshape(h, w, 3),
            "depth": depth.reshape(h, w),
            "albedo_rgb": alb_rgb.reshape(h, w, 3),
            "albedo_nir": alb_nir.reshape(h, w),
            "roughness": rough_map.reshape(h, w),
            "metallic": metal_map.reshape(h, w)}


# ---------------------------------------------------------------------------
# Scene and trajectory builders
# ---------------------------------------------------------------------------

def make_env(kind: str, height: int = 16, width: int = 32, value: float = 0.5,
             seed: int = 0, mean_luminance: float | None = None) -> np.ndarray:
    """Procedural (H, W, 3) environment maps: 'constant', 'gradient', 'lobes'.

    With ``mean_luminance`` the map is rescaled so its solid-angle-weighted
    mean luminance hits the target (used to build equal-energy env variants).
    """
    dirs = texel_center_dirs(height, width)
    if kind == "constant":
        env = np.full((height, width, 3), float(value))
    elif kind == "gradient":
        up = np.maximum(dirs[..., 1], 0.0)
        down = np.maximum(-dirs[..., 1], 0.0)
        env = (0.12 + up[..., None] * np.array([0.45, 0.65, 0.95])
               + down[..., None] * np.array([0.38, 0.28, 0.16]))
    elif kind == "lobes":
        rng = np.random.Generator(np.random.Philox(seed))
        env = np.full((height, width, 3), 0.05)
        for _ in range(3):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            color = rng.uniform(0.25, 1.0, size=3)
            kappa = rng.uniform(4.0, 14.0)
            env = env + np.exp(kappa * (dirs @ axis - 1.0))[..., None] * color
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    if mean_luminance is not None:
        solid = texel_solid_angles(height, width)
        mean = float((luminance(env) * solid[:, None]).sum() / (4.0 * np.pi))
        env = env * (mean_luminance / mean)
    return env


def two_sphere_scene(env: np.ndarray | None = None, nir_ambient: float = 0.05,
                     flash: FlashModel | None = None) -> AnalyticScene:
    """Standard test subject: a rough dielectric next to a glossy metal."""
    if env is None:
        env = make_env("gradient")
    if flash is None:
        flash = FlashModel(offset=np.array([0.05, -0.02, 0.0]), intensity=4.0)
    matte = SurfaceBRDF(albedo=np.array([0.62, 0.28, 0.21, 0.58]),
                        roughness=0.45, metallic=0.05)
    glossy = SurfaceBRDF(albedo=np.array([0.24, 0.42, 0.60, 0.35]),
                         roughness=0.18, metallic=0.70)
    return AnalyticScene(
        primitives=[Sphere(center=np.array([-0.32, 0.02, 0.0]), radius=0.30,
                           material=matte),
                    Sphere(center=np.array([0.38, -0.04, 0.08]), radius=0.24,
                           material=glossy)],
        env=env, nir_ambient=nir_ambient, flash=flash)


def ring_cameras(count: int, radius: float, elevation_deg: float,
                 target=(0.0, 0.0, 0.0), width: int = 64, height: int = 64,
                 fov_deg: float = 45.0) -> list[Camera]:
    """Inward-looking cameras evenly spaced on a circle around the target."""
    target = np.asarray(target, dtype=np.float64)
    el = np.radians(elevation_deg)
    focal = width / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    cams = []
    for k in range(count):
        az = 2.0 * np.pi * k / count
        pos = target + radius * np.array([np.cos(el) * np.sin(az), np.sin(el),
                                          np.cos(el) * np.cos(az)])
        cams.append(look_at_camera(pos, target, up=(0.0, 1.0, 0.0),
                                   fx=focal, fy=focal,
                                   cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                                   width=width, height=height))
    return cams


def generate_capture_set(scene: AnalyticScene, cameras: list[Camera],
                         out_dir, flash: FlashModel | None = None,
                         n_theta: int = 32, n_phi: int = 64,
                         ground_truth: bool = True,
                         previews: bool = False) -> Path:
    """Render a full capture set (plus ground truth) to ``out_dir``."""
    if flash is None:
        flash = scene.flash
    if flash is None:
        raise ValueError("no flash: set scene.flash or pass one explicitly")
    if len(cameras) < 3:
        raise ValueError("a capture set needs at least 3 views")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"view_{k:04d}" for k in range(len(cameras))]
    _dataset.write_poses(out / "poses.json", cameras, names)
    _dataset.write_flash(out / "flash.json", flash)
    gt_root = out / "ground_truth"
    if ground_truth:
        gt_root.mkdir(exist_ok=True)
        _dataset.save_pfm(gt_root / "env.pfm", scene.env)
        with open(gt_root / "scene.json", "w") as fh:
            json.dump({"nir_ambient": scene.nir_ambient,
                       "primitive_count": len(scene.primitives)},
                      fh, sort_keys=True, indent=1)
    for cam, name in zip(cameras, names):
        ref = render_reference(scene, cam, flash=flash, n_theta=n_theta, n_phi=n_phi)
        vdir = out / name
        vdir.mkdir(exist_ok=True)
        _dataset.save_pfm(vdir / "rgb.pfm", ref["rgb"])
        _dataset.save_pfm(vdir / "nir_on.pfm", ref["nir_on"])
        _dataset.save_pfm(vdir / "nir_off.pfm", ref["nir_off"])
        _dataset.save_pfm(vdir / "mask.pfm", ref["mask"])
        if previews:
            _dataset.save_png_preview(vdir / "rgb_preview.png", ref["rgb"])
        if ground_truth:
            gdir = gt_root / name
            gdir.mkdir(exist_ok=True)
            _dataset.save_pfm(gdir / "nir_flash.pfm", ref["nir_flash"])
            _dataset.save_pfm(gdir / "normal.pfm", ref["normal"])
            _dataset.save_pfm(gdir / "depth.pfm", ref["depth"])
            _dataset.save_pfm(gdir / "albedo_rgb.pfm", ref["albedo_rgb"])
            _dataset.save_pfm(gdir / "albedo_nir.pfm", ref["albedo_nir"])
            _dataset.save_pfm(gdir / "roughness.pfm", ref["roughness"])
            _dataset.save_pfm(gdir / "metallic.pfm", ref["metallic"])
    return out


# ---------------------------------------------------------------------------
# Exact surfelization (isolates the splat renderer from fitting error)
# ---------------------------------------------------------------------------

def surfelize_sphere(sphere: Sphere, count: int, n_bases: int = 8,
                     radial_factor: float = 0.9, opacity: float = 1.0) -> GaussianScene:
    """Tile a sphere with flat splats carrying the exact surface attributes.

    Splat normals/positions/materials are taken from the analytic surface, so
    comparing a splat render against the reference isolates rasterization and
    sampling error from reconstruction error.
    """
    dirs = fibonacci_sphere(count)
    centers = sphere.center + sphere.radius * dirs
    t1, t2 = _tangent_frames(dirs)
    quat = np.zeros((count, 4))
    for k in range(count):
        quat[k] = rotmat_to_quat(np.stack([t1[k], t2[k], dirs[k]], axis=1))
    sigma_s = 2.0 * sphere.radius / np.sqrt(count) * radial_factor
    opacity_logit = np.full(count, np.inf if opacity >= 1.0 else
                            float(np.log(opacity / (1.0 - opacity))))

    alb, rough, metal = surface_materials(
        AnalyticScene([sphere], env=np.full((2, 4, 3), 0.1)),
        np.zeros(count, dtype=np.int64), centers)
    scene = GaussianScene(
        center=centers, quat=quat,
        log_scale=np.full((count, 2), np.log(sigma_s)),
        opacity_logit=opacity_logit,
        sh=np.zeros((count, 3, SH_COEFF_COUNT)),
        mixture_logit=np.zeros((count, n_bases)),
        albedo_logit=unsquash01(alb[:, :3]),
        basis_rho_raw=unsquash01(np.linspace(0.2, 0.8, n_bases)),
        basis_sigma_raw=np.zeros(n_bases),
        basis_m_raw=np.zeros(n_bases),
        stage="transferred",
        collapsed_sigma=rough.copy(),
        collapsed_m=metal.copy(),
        collapsed_rho_nir=alb[:, 3].copy())
    return scene
