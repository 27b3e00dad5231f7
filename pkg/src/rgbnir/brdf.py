"""Reflectance model: diffuse + GGX microfacet specular with a shared basis mixture.

Per-channel BRDF value for reflectance triple (rho, sigma, m):

    f = (1 - m)/pi * rho + D(h; sigma) F(o, h; m) G(i, o, n; sigma) / (4 (n.i)(n.o))

with the Disney roughness remap alpha = sigma^2, Schlick Fresnel around an
achromatic F0 = 0.04 + 0.96 m, and the Smith/Schlick-GGX visibility term.
Roughness and metallic are spectrally shared; only rho varies per channel.
All evaluation functions are numpy-vectorized and return 0 below the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .core import Channel, normalize

# Roughness floor: keeps the specular lobe wider than the sampling/quadrature
# resolution and the Disney remap well conditioned.
SIGMA_MIN = 0.04

_F0_BASE = 0.04


@dataclass
class SurfaceBRDF:
    """Point reflectance: per-channel albedo (R, G, B, NIR), shared roughness/metallic."""

    albedo: np.ndarray
    roughness: float
    metallic: float

    def __post_init__(self) -> None:
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(4)
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            raise ValueError("albedo components must lie in [0, 1]")
        if not (SIGMA_MIN <= self.roughness <= 1.0):
            raise ValueError(f"roughness must lie in [{SIGMA_MIN}, 1]")
        if not (0.0 <= self.metallic <= 1.0):
            raise ValueError("metallic must lie in [0, 1]")


@dataclass
class BasisSet:
    """N basis reflectance triples (rho_nir, roughness, metallic), shared by all splats."""

    rho_nir: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    def __post_init__(self) -> None:
        self.rho_nir = np.asarray(self.rho_nir, dtype=np.float64).reshape(-1)
        self.roughness = np.asarray(self.roughness, dtype=np.float64).reshape(-1)
        self.metallic = np.asarray(self.metallic, dtype=np.float64).reshape(-1)
        n = self.rho_nir.shape[0]
        if n < 1:
            raise ValueError("basis set must contain at least one entry")
        if self.roughness.shape[0] != n or self.metallic.shape[0] != n:
            raise ValueError("basis arrays must share a common length")
        if np.any(self.rho_nir < 0) or np.any(self.rho_nir > 1):
            raise ValueError("basis rho_nir must lie in [0, 1]")
        if np.any(self.roughness < SIGMA_MIN) or np.any(self.roughness > 1):
            raise ValueError(f"basis roughness must lie in [{SIGMA_MIN}, 1]")
        if np.any(self.metallic < 0) or np.any(self.metallic > 1):
            raise ValueError("basis metallic must lie in [0, 1]")

    @property
    def count(self) -> int:
        return int(self.rho_nir.shape[0])


@dataclass
class MixtureWeights:
    """Convex weights over a basis set (simplex, tolerance 1e-6)."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if np.any(self.weights < -1e-12):
            raise ValueError("mixture weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError(f"mixture weights must sum to 1, got {self.weights.sum()}")


# ---------------------------------------------------------------------------
# Microfacet terms
# ---------------------------------------------------------------------------

def ggx_d(cos_h, roughness):
    """GGX normal distribution; cos_h = n.h. Zero below the horizon."""
    cos_h = np.asarray(cos_h, dtype=np.float64)
    alpha = np.maximum(np.asarray(roughness, dtype=np.float64), SIGMA_MIN) ** 2
    a2 = alpha * alpha
    denom = cos_h * cos_h * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * denom * denom)
    return np.where(cos_h > 0.0, d, 0.0)


def smith_g(cos_i, cos_o, roughness):
    """Smith visibility with the Schlick-GGX G1, k = alpha/2. Zero below the horizon."""
    cos_i = np.asarray(cos_i, dtype=np.float64)
    cos_o = np.asarray(cos_o, dtype=np.float64)
    k = 0.5 * np.maximum(np.asarray(roughness, dtype=np.float64), SIGMA_MIN) ** 2
    gi = cos_i / (cos_i * (1.0 - k) + k)
    go = cos_o / (cos_o * (1.0 - k) + k)
    return np.where((cos_i > 0.0) & (cos_o > 0.0), gi * go, 0.0)


def fresnel(cos_oh, metallic):
    """Schlick Fresnel with achromatic F0 = 0.04 + 0.96 * metallic."""
    cos_oh = np.clip(np.asarray(cos_oh, dtype=np.float64), 0.0, 1.0)
    f0 = _F0_BASE + (1.0 - _F0_BASE) * np.asarray(metallic, dtype=np.float64)
    return f0 + (1.0 - f0) * (1.0 - cos_oh) ** 5


def _half_vector(i, o):
    h = np.asarray(i, dtype=np.float64) + np.asarray(o, dtype=np.float64)
    n = np.linalg.norm(h, axis=-1, keepdims=True)
    return h / np.maximum(n, 1e-12)


def _geometry_cosines(i, o, n):
    i = np.asarray(i, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    h = _half_vector(i, o)
    ci = np.sum(i * n, axis=-1)
    co = np.sum(o * n, axis=-1)
    ch = np.sum(n * h, axis=-1)
    coh = np.sum(o * h, axis=-1)
    return ci, co, ch, coh, h


def eval_parts_cosines(rho, sigma, m, ci, co, ch, coh):
    """Diffuse and specular parts from precomputed cosines; zero below the horizon."""
    rho = np.asarray(rho, dtype=np.float64)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    m = np.asarray(m, dtype=np.float64)
    up = (ci > 0.0) & (co > 0.0)
    diffuse = np.where(up, (1.0 - m) / np.pi * rho, 0.0)
    d = ggx_d(ch, sigma)
    g = smith_g(np.where(up, ci, 1.0), np.where(up, co, 1.0), sigma)
    f = fresnel(coh, m)
    denom = 4.0 * np.where(up, ci * co, 1.0)
    specular = np.where(up, d * f * g / denom, 0.0)
    return diffuse, specular


def eval_surface_parts(brdf: SurfaceBRDF, channel: Channel, i, o, n):
    """(diffuse, specular) BRDF parts for one channel at unit directions i, o, n."""
    ci, co, ch, coh, _ = _geometry_cosines(i, o, n)
    diffuse, specular = eval_parts_cosines(brdf.albedo[int(channel)], brdf.roughness,
                                           brdf.metallic, ci, co, ch, coh)
    return float(diffuse), float(specular)


def eval_surface(brdf: SurfaceBRDF, channel: Channel, i, o, n) -> float:
    """BRDF value for one channel; i, o point away from the surface, n is unit."""
    diffuse, specular = eval_surface_parts(brdf, channel, i, o, n)
    return diffuse + specular


def eval_many(rho, sigma, m, i, o, n):
    """Vectorized BRDF for per-sample reflectance triples and directions.

    rho may carry a trailing channel axis; sigma/m are per sample. Shapes
    broadcast; returns values matching rho's shape.
    """
    ci, co, ch, coh, _ = _geometry_cosines(i, o, n)
    rho = np.asarray(rho, dtype=np.float64)
    if rho.ndim == np.ndim(ci) + 1:
        ci, co, ch, coh = (x[..., None] for x in (ci, co, ch, coh))
        sigma = np.asarray(sigma, dtype=np.float64)[..., None]
        m = np.asarray(m, dtype=np.float64)[..., None]
    diffuse, specular = eval_parts_cosines(rho, sigma, m, ci, co, ch, coh)
    return diffuse + specular


# ---------------------------------------------------------------------------
# Analytic parameter and geometry gradients
# ---------------------------------------------------------------------------

def eval_grad_cosines(rho, sigma, m, ci, co, ch, coh):
    """Value plus analytic derivatives of f w.r.t. every scalar argument.

    Returns a dict with 'f' and 'd_rho', 'd_sigma', 'd_m', 'd_ci', 'd_co',
    'd_ch', 'd_coh'. Everything is zero below the horizon (ci or co <= 0).
    """
    rho = np.asarray(rho, dtype=np.float64)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    m = np.asarray(m, dtype=np.float64)
    ci = np.asarray(ci, dtype=np.float64)
    co = np.asarray(co, dtype=np.float64)
    ch = np.asarray(ch, dtype=np.float64)
    coh = np.clip(np.asarray(coh, dtype=np.float64), 0.0, 1.0)

    up = (ci > 0.0) & (co > 0.0)
    ci_s = np.where(up, ci, 1.0)
    co_s = np.where(up, co, 1.0)

    alpha = sigma * sigma
    a2 = alpha * alpha
    ch_pos = np.maximum(ch, 0.0)
    big_a = ch_pos * ch_pos * (a2 - 1.0) + 1.0
    d_val = np.where(ch > 0.0, a2 / (np.pi * big_a * big_a), 0.0)
    dd_dalpha = np.where(ch > 0.0,
                         2.0 * alpha / (np.pi * big_a * big_a)
                         - 4.0 * alpha * a2 * ch_pos * ch_pos / (np.pi * big_a ** 3), 0.0)
    dd_dch = np.where(ch > 0.0,
                      -4.0 * a2 * ch_pos * (a2 - 1.0) / (np.pi * big_a ** 3), 0.0)

    k = 0.5 * alpha
    den_i = ci_s * (1.0 - k) + k
    den_o = co_s * (1.0 - k) + k
    g1i = ci_s / den_i
    g1o = co_s / den_o
    g_val = g1i * g1o
    dg1i_dk = -ci_s * (1.0 - ci_s) / (den_i * den_i)
    dg1o_dk = -co_s * (1.0 - co_s) / (den_o * den_o)
    dg_dalpha = 0.5 * (dg1i_dk * g1o + g1i * dg1o_dk)
    dg_dci = k / (den_i * den_i) * g1o
    dg_dco = g1i * k / (den_o * den_o)

    f0 = _F0_BASE + (1.0 - _F0_BASE) * m
    q = (1.0 - coh) ** 5
    f_val = f0 + (1.0 - f0) * q
    df_dm = (1.0 - _F0_BASE) * (1.0 - q)
    df_dcoh = -(1.0 - f0) * 5.0 * (1.0 - coh) ** 4

    inv4 = 1.0 / (4.0 * ci_s * co_s)
    spec = d_val * f_val * g_val * inv4
    dalpha_dsigma = 2.0 * sigma

    out = {
        "f": np.where(up, (1.0 - m) / np.pi * rho + spec, 0.0),
        "d_rho": np.where(up, (1.0 - m) / np.pi, 0.0),
        "d_m": np.where(up, -rho / np.pi + d_val * g_val * inv4 * df_dm, 0.0),
        "d_sigma": np.where(up, (dd_dalpha * f_val * g_val + d_val * f_val * dg_dalpha)
                            * dalpha_dsigma * inv4, 0.0),
        "d_ci": np.where(up, d_val * f_val * dg_dci * inv4 - spec / ci_s, 0.0),
        "d_co": np.where(up, d_val * f_val * dg_dco * inv4 - spec / co_s, 0.0),
        "d_ch": np.where(up, dd_dch * f_val * g_val * inv4, 0.0),
        "d_coh": np.where(up, d_val * df_dcoh * g_val * inv4, 0.0),
    }
    return out


def eval_surface_grad(brdf: SurfaceBRDF, channel: Channel, i, o, n):
    """(f, df/drho, df/dsigma, df/dm) for one channel at unit directions."""
    ci, co, ch, coh, _ = _geometry_cosines(i, o, n)
    g = eval_grad_cosines(brdf.albedo[int(channel)], brdf.roughness, brdf.metallic,
                          ci, co, ch, coh)
    return float(g["f"]), float(g["d_rho"]), float(g["d_sigma"]), float(g["d_m"])


def eval_grad_directions(rho, sigma, m, i, o, n):
    """Value and gradients of f w.r.t. the vectors i, o, n (plus rho/sigma/m).

    Used by the flash shading backward pass; broadcasts over leading axes.
    Returns dict with 'f', 'd_rho', 'd_sigma', 'd_m', 'd_i', 'd_o', 'd_n'.
    """
    i = np.asarray(i, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    hsum = i + o
    hl = np.maximum(np.linalg.norm(hsum, axis=-1, keepdims=True), 1e-12)
    h = hsum / hl
    ci = np.sum(i * n, axis=-1)
    co = np.sum(o * n, axis=-1)
    ch = np.sum(n * h, axis=-1)
    coh = np.sum(o * h, axis=-1)
    g = eval_grad_cosines(rho, sigma, m, ci, co, ch, coh)

    # dh/di = dh/do = (I - h h^T)/|i + o|; contract with the cosine gradients.
    gch = g["d_ch"][..., None]
    gcoh = g["d_coh"][..., None]
    vec_n = gch * n
    vec_o = gcoh * o
    def through_h(v):
        return (v - h * np.sum(h * v, axis=-1, keepdims=True)) / hl
    dh_common = through_h(vec_n + vec_o)
    d_i = g["d_ci"][..., None] * n + dh_common
    d_o = g["d_co"][..., None] * n + dh_common + gcoh * h
    d_n = g["d_ci"][..., None] * i + g["d_co"][..., None] * o + gch * h
    return {"f": g["f"], "d_rho": g["d_rho"], "d_sigma": g["d_sigma"], "d_m": g["d_m"],
            "d_i": d_i, "d_o": d_o, "d_n": d_n}


# ---------------------------------------------------------------------------
# Basis mixture and cross-spectral collapse
# ---------------------------------------------------------------------------

def eval_mixture(bases: BasisSet, weights: MixtureWeights, i, o, n) -> float:
    """NIR mixture BRDF: sum_k w_k f_k(i, o) with shared directions."""
    if weights.weights.shape[0] != bases.count:
        raise ValueError("weight count does not match basis count")
    ci, co, ch, coh, _ = _geometry_cosines(i, o, n)
    diffuse, specular = eval_parts_cosines(bases.rho_nir, bases.roughness, bases.metallic,
                                           ci, co, ch, coh)
    return float(np.sum(weights.weights * (diffuse + specular)))


def collapse(bases: BasisSet, weights) -> tuple[float, float, float]:
    """Mixture -> single triple: (sigma, m, rho_nir) as weight-convex combinations."""
    w = weights.weights if isinstance(weights, MixtureWeights) else MixtureWeights(weights).weights
    if w.shape[0] != bases.count:
        raise ValueError("weight count does not match basis count")
    return (float(np.dot(w, bases.roughness)),
            float(np.dot(w, bases.metallic)),
            float(np.dot(w, bases.rho_nir)))


def collapse_many(bases: BasisSet, weights: np.ndarray):
    """Row-wise collapse for (M, N) weight arrays -> (sigma, m, rho_nir) each (M,)."""
    w = np.asarray(weights, dtype=np.float64)
    return w @ bases.roughness, w @ bases.metallic, w @ bases.rho_nir


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def diffuse_probability(m):
    """Lobe-selection probability for the diffuse component.

    0.5*(1 - m) clamped to [0.1, 0.9] for 0 < m < 1; the endpoints are exact
    (pure cosine at m = 0, pure specular at m = 1).
    """
    m = np.asarray(m, dtype=np.float64)
    p = np.clip(0.5 * (1.0 - m), 0.1, 0.9)
    p = np.where(m <= 0.0, 1.0, p)
    p = np.where(m >= 1.0, 0.0, p)
    if p.ndim == 0:
        return float(p)
    return p


def orthonormal_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tangent/bitangent pair completing unit normals (broadcasts over leading axes)."""
    n = np.asarray(n, dtype=np.float64)
    helper = np.zeros_like(n)
    use_x = np.abs(n[..., 0]) < 0.9
    helper[..., 0] = np.where(use_x, 1.0, 0.0)
    helper[..., 1] = np.where(use_x, 0.0, 1.0)
    t = np.cross(helper, n)
    t = t / np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    b = np.cross(n, t)
    return t, b


def sample_directions(o, n, sigma, m, u):
    """Vector version of sample_direction; o, n are (P,3), u is (P,2).

    Returns (i (P,3), pdf (P,)). A specular draw whose reflection lands below
    the horizon keeps its direction but reports pdf 0 so callers can drop it
    without biasing estimators.
    """
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), o.shape[:1]).copy()
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), o.shape[:1]).copy()
    p_d = np.asarray(diffuse_probability(m), dtype=np.float64)
    p_d = np.broadcast_to(p_d, o.shape[:1])

    take_diffuse = u[:, 0] < p_d
    # Reuse the selector uniform after rescaling it back to [0, 1).
    u0 = np.where(take_diffuse, u[:, 0] / np.maximum(p_d, 1e-12),
                  (u[:, 0] - p_d) / np.maximum(1.0 - p_d, 1e-12))
    u0 = np.clip(u0, 0.0, 1.0 - 1e-12)
    u1 = u[:, 1]

    t, b = orthonormal_frame(n)

    # Cosine lobe.
    r = np.sqrt(u0)
    phi = 2.0 * np.pi * u1
    loc_d = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(1.0 - u0)], axis=1)

    # GGX half-vector lobe, reflected about o.
    alpha = np.maximum(sigma, SIGMA_MIN) ** 2
    a2 = alpha * alpha
    ch = np.sqrt((1.0 - u0) / (1.0 + (a2 - 1.0) * u0))
    sh = np.sqrt(np.maximum(1.0 - ch * ch, 0.0))
    loc_h = np.stack([sh * np.cos(phi), sh * np.sin(phi), ch], axis=1)

    local = np.where(take_diffuse[:, None], loc_d, loc_h)
    world = local[:, 0:1] * t + local[:, 1:2] * b + local[:, 2:3] * n
    coh = np.sum(o * world, axis=1)
    refl = 2.0 * coh[:, None] * world - o
    i = np.where(take_diffuse[:, None], world, refl)
    i = i / np.maximum(np.linalg.norm(i, axis=1, keepdims=True), 1e-12)

    pdf = pdf_directions(o, n, sigma, m, i)
    # Failed specular draws: reflection below horizon or backfacing half vector.
    bad = (~take_diffuse) & ((np.sum(i * n, axis=1) <= 0.0) | (coh <= 0.0))
    pdf = np.where(bad, 0.0, pdf)
    return i, pdf


def sample_direction(o, n, sigma, m, u):
    """Draw one incident direction for the (sigma, m) lobe mix from two uniforms."""
    i, pdf = sample_directions(np.asarray(o)[None, :], np.asarray(n)[None, :],
                               sigma, m, np.asarray(u, dtype=np.float64)[None, :])
    return i[0], float(pdf[0])


def pdf_directions(o, n, sigma, m, i):
    """Vectorized solid-angle density of sample_directions at directions i."""
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    i = np.atleast_2d(np.asarray(i, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), o.shape[:1])
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), o.shape[:1])
    p_d = np.broadcast_to(np.asarray(diffuse_probability(m), dtype=np.float64), o.shape[:1])

    ci = np.sum(i * n, axis=1)
    cosine_pdf = np.maximum(ci, 0.0) / np.pi

    h = _half_vector(i, o)
    ch = np.sum(n * h, axis=1)
    coh = np.sum(o * h, axis=1)
    d = ggx_d(ch, sigma)
    ggx_pdf = np.where((ch > 0.0) & (coh > 1e-9), d * ch / (4.0 * np.maximum(coh, 1e-9)), 0.0)

    pdf = p_d * cosine_pdf + (1.0 - p_d) * ggx_pdf
    return np.where(ci > 0.0, pdf, 0.0)


def pdf_direction(o, n, sigma, m, i) -> float:
    """Solid-angle density of sample_direction at i; 0 for i below the horizon."""
    return float(pdf_directions(np.asarray(o)[None, :], np.asarray(n)[None, :],
                                sigma, m, np.asarray(i)[None, :])[0])


# ---------------------------------------------------------------------------
# Optimizer-facing parameterization
# ---------------------------------------------------------------------------

def squash01(x):
    """Unconstrained -> (0, 1) logistic squash."""
    return expit(np.asarray(x, dtype=np.float64))


def squash01_grad(x):
    s = expit(np.asarray(x, dtype=np.float64))
    return s * (1.0 - s)


def unsquash01(y):
    return logit(np.clip(np.asarray(y, dtype=np.float64), 1e-9, 1.0 - 1e-9))


def squash_sigma(x):
    """Unconstrained -> (SIGMA_MIN, 1) roughness squash."""
    return SIGMA_MIN + (1.0 - SIGMA_MIN) * expit(np.asarray(x, dtype=np.float64))


def squash_sigma_grad(x):
    s = expit(np.asarray(x, dtype=np.float64))
    return (1.0 - SIGMA_MIN) * s * (1.0 - s)


def unsquash_sigma(sigma):
    y = (np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN + 1e-9, 1.0 - 1e-9)
         - SIGMA_MIN) / (1.0 - SIGMA_MIN)
    return logit(y)


def softmax(logits, axis=-1):
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(weights, grad, axis=-1):
    """Chain a gradient w.r.t. softmax outputs back to the logits."""
    inner = np.sum(weights * grad, axis=axis, keepdims=True)
    return weights * (grad - inner)
