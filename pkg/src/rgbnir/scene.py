"""2D Gaussian surfel scene: flat elliptical splats with reflectance attributes.

Each splat is a zero-thickness disc spanned by an orthonormal tangent frame
with per-axis scales, plus an opacity, SH radiance coefficients (degree 2),
mixture logits over the shared reflectance basis, and an RGB albedo. The
optimizer-facing storage is struct-of-arrays with unconstrained raw
parameters (quaternions, log scales, logits); activated views are derived.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit

from . import brdf as _brdf
from .core import Camera, Ray

SH_COEFF_COUNT = 9  # degree 2

# Influence below this cutoff does not contribute (and is not differentiated).
INFLUENCE_CUTOFF = 1e-4

_CKPT_MAGIC = b"RNSC"
_CKPT_VERSION = 1

STAGE_TAGS = ("seeded", "stage1", "stage2", "transferred", "stage3")


@dataclass
class Gaussian2D:
    """Value view of a single splat with activated (constrained) parameters."""

    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    opacity: float
    sh_coeffs: np.ndarray | None = None
    mixture_logits: np.ndarray | None = None
    albedo_rgb: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64).reshape(3)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64).reshape(3)
        for t in (self.tangent_u, self.tangent_v):
            if abs(np.linalg.norm(t) - 1.0) > 1e-6:
                raise ValueError("tangent vectors must be unit length")
        if abs(np.dot(self.tangent_u, self.tangent_v)) > 1e-6:
            raise ValueError("tangent vectors must be orthogonal")
        if self.scale_u <= 0.0 or self.scale_v <= 0.0:
            raise ValueError("scales must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.tangent_u, self.tangent_v)


def influence(u, v):
    """Unnormalized Gaussian falloff in splat-local units."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.exp(-0.5 * (u * u + v * v))


def intersect(gaussian: Gaussian2D, ray: Ray):
    """Exact ray/splat-plane intersection: (t, u, v) or None.

    None when the ray is parallel to the plane or the hit lies at t <= 0.
    """
    n = gaussian.normal
    denom = float(np.dot(ray.direction, n))
    if abs(denom) < 1e-12:
        return None
    t = float(np.dot(gaussian.center - ray.origin, n)) / denom
    if t <= 0.0:
        return None
    q = ray.origin + t * ray.direction - gaussian.center
    u = float(np.dot(q, gaussian.tangent_u)) / gaussian.scale_u
    v = float(np.dot(q, gaussian.tangent_v)) / gaussian.scale_v
    return t, u, v


# ---------------------------------------------------------------------------
# Quaternion frames
# ---------------------------------------------------------------------------

def quat_normalize(quats: np.ndarray) -> np.ndarray:
    q = np.asarray(quats, dtype=np.float64)
    return q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)


def quat_to_frames(quats: np.ndarray):
    """Unit quaternions (M, 4) wxyz -> tangent_u, tangent_v, normal, each (M, 3)."""
    q = quat_normalize(quats)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    tu = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=1)
    tv = np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=1)
    n = np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=1)
    return tu, tv, n


def quat_frame_jacobians(quats: np.ndarray):
    """d(column)/d(unit quaternion) for the three frame columns: each (M, 3, 4)."""
    q = quat_normalize(quats)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    j_tu = 2.0 * np.stack([
        np.stack([zero, zero, -2 * y, -2 * z], axis=1),
        np.stack([z, y, x, w], axis=1),
        np.stack([-y, z, -w, x], axis=1)], axis=1)
    j_tv = 2.0 * np.stack([
        np.stack([-z, y, x, -w], axis=1),
        np.stack([zero, -2 * x, zero, -2 * z], axis=1),
        np.stack([x, w, z, y], axis=1)], axis=1)
    j_n = 2.0 * np.stack([
        np.stack([y, z, w, x], axis=1),
        np.stack([-x, -w, z, y], axis=1),
        np.stack([zero, -2 * x, -2 * y, zero], axis=1)], axis=1)
    return j_tu, j_tv, j_n


def quat_raw_chain(quats_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. the unit quaternion back to the raw parameter."""
    q_raw = np.asarray(quats_raw, dtype=np.float64)
    norm = np.maximum(np.linalg.norm(q_raw, axis=-1, keepdims=True), 1e-12)
    q = q_raw / norm
    inner = np.sum(q * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - q * inner) / norm


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (wxyz), numerically safe branches."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] >= r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# Scene container
# ---------------------------------------------------------------------------

@dataclass
class GaussianScene:
    """Struct-of-arrays splat collection plus the shared reflectance basis.

    Raw (unconstrained) parameter arrays; use the activated properties for
    physical values. ``version`` increments on mutation so render outputs can
    detect stale contributor lists.
    """

    center: np.ndarray            # (M, 3)
    quat: np.ndarray              # (M, 4) raw, normalized on use
    log_scale: np.ndarray         # (M, 2)
    opacity_logit: np.ndarray     # (M,)
    sh: np.ndarray                # (M, 3, 9)
    mixture_logit: np.ndarray     # (M, N)
    albedo_logit: np.ndarray      # (M, 3)
    basis_rho_raw: np.ndarray     # (N,)
    basis_sigma_raw: np.ndarray   # (N,)
    basis_m_raw: np.ndarray       # (N,)
    stage: str = "seeded"
    collapsed_sigma: np.ndarray | None = None
    collapsed_m: np.ndarray | None = None
    collapsed_rho_nir: np.ndarray | None = None
    version: int = 0

    def __post_init__(self) -> None:
        m = self.center.shape[0]
        if m < 1:
            raise ValueError("scene must contain at least one Gaussian")
        if self.stage not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {self.stage!r}")
        for name in ("center", "quat", "log_scale", "opacity_logit", "sh",
                     "mixture_logit", "albedo_logit"):
            arr = getattr(self, name)
            if arr.shape[0] != m:
                raise ValueError(f"{name} count mismatch")
            if not np.all(np.isfinite(arr) | np.isinf(arr)):
                raise ValueError(f"{name} contains NaN")

    @property
    def count(self) -> int:
        return int(self.center.shape[0])

    @property
    def basis_count(self) -> int:
        return int(self.basis_rho_raw.shape[0])

    @property
    def bases(self) -> _brdf.BasisSet:
        return _brdf.BasisSet(rho_nir=_brdf.squash01(self.basis_rho_raw),
                              roughness=_brdf.squash_sigma(self.basis_sigma_raw),
                              metallic=_brdf.squash01(self.basis_m_raw))

    @property
    def opacity(self) -> np.ndarray:
        return _brdf.squash01(self.opacity_logit)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def albedo_rgb(self) -> np.ndarray:
        return _brdf.squash01(self.albedo_logit)

    @property
    def mixture_weights(self) -> np.ndarray:
        return _brdf.softmax(self.mixture_logit, axis=1)

    def frames(self):
        return quat_to_frames(self.quat)

    def bump(self) -> None:
        """Mark parameters mutated; invalidates outstanding contributor lists."""
        self.version += 1

    def gaussian(self, index: int) -> Gaussian2D:
        tu, tv, _ = quat_to_frames(self.quat[index:index + 1])
        s = np.exp(self.log_scale[index])
        return Gaussian2D(center=self.center[index].copy(),
                          tangent_u=tu[0], tangent_v=tv[0],
                          scale_u=float(s[0]), scale_v=float(s[1]),
                          opacity=float(_brdf.squash01(self.opacity_logit[index])),
                          sh_coeffs=self.sh[index].copy(),
                          mixture_logits=self.mixture_logit[index].copy(),
                          albedo_rgb=_brdf.squash01(self.albedo_logit[index]))

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"center": self.center, "quat": self.quat, "log_scale": self.log_scale,
                "opacity_logit": self.opacity_logit, "sh": self.sh,
                "mixture_logit": self.mixture_logit, "albedo_logit": self.albedo_logit,
                "basis_rho_raw": self.basis_rho_raw,
                "basis_sigma_raw": self.basis_sigma_raw,
                "basis_m_raw": self.basis_m_raw}


def from_gaussians(gaussians: list[Gaussian2D], n_bases: int = 8,
                   stage: str = "seeded") -> GaussianScene:
    """Build a scene from explicit splats (mostly for tests and small fixtures)."""
    m = len(gaussians)
    if m == 0:
        raise ValueError("scene must contain at least one Gaussian")
    center = np.zeros((m, 3))
    quat = np.zeros((m, 4))
    log_scale = np.zeros((m, 2))
    opacity_logit = np.zeros(m)
    sh = np.zeros((m, 3, SH_COEFF_COUNT))
    mix = np.zeros((m, n_bases))
    alb = np.zeros((m, 3))
    for k, g in enumerate(gaussians):
        center[k] = g.center
        rot = np.stack([g.tangent_u, g.tangent_v, g.normal], axis=1)
        quat[k] = rotmat_to_quat(rot)
        log_scale[k] = np.log([g.scale_u, g.scale_v])
        opacity_logit[k] = logit(g.opacity)  # +/-inf at the exact endpoints
        if g.sh_coeffs is not None:
            sh[k] = g.sh_coeffs
        if g.mixture_logits is not None:
            mix[k] = g.mixture_logits
        if g.albedo_rgb is not None:
            alb[k] = _brdf.unsquash01(g.albedo_rgb)
    return GaussianScene(center=center, quat=quat, log_scale=log_scale,
                         opacity_logit=opacity_logit, sh=sh, mixture_logit=mix,
                         albedo_logit=alb,
                         basis_rho_raw=_brdf.unsquash01(np.linspace(0.2, 0.8, n_bases)),
                         basis_sigma_raw=_brdf.unsquash_sigma(np.linspace(0.1, 0.9, n_bases)),
                         basis_m_raw=_brdf.unsquash01(np.full(n_bases, 0.1)),
                         stage=stage)


def depth_sort(scene: GaussianScene, camera: Camera) -> np.ndarray:
    """Indices of camera-visible splats by ascending center depth (stable ties)."""
    z = (scene.center @ camera.rotation.T + camera.translation)[:, 2]
    visible = np.flatnonzero(z > 0.0)
    order = np.argsort(z[visible], kind="stable")
    return visible[order]


def fibonacci_sphere(count: int) -> np.ndarray:
    """Deterministic quasi-uniform unit sphere points."""
    k = np.arange(count, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    y = 1.0 - 2.0 * (k + 0.5) / count
    r = np.sqrt(np.maximum(1.0 - y * y, 0.0))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def seed_scene(center, radius: float, count: int, n_bases: int,
               rng: np.random.Generator) -> GaussianScene:
    """Seed splats on a bounding sphere with random tangent frames.

    Scales start at roughly the area-even spacing so the sphere is covered;
    opacity starts at one half, high enough that silhouettes register
    against the mask loss from the first steps while wrongly placed splats
    can still fade.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(center, dtype=np.float64) + radius * fibonacci_sphere(count)
    quat = rng.normal(size=(count, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    r0 = np.sqrt(4.0 * np.pi * radius * radius / count) * 0.7
    sh = np.zeros((count, 3, SH_COEFF_COUNT))
    sh[:, :, 0] = (0.4 - 0.5) / 0.28209479177387814  # mid-gray start
    return GaussianScene(center=pts, quat=quat,
                         log_scale=np.full((count, 2), np.log(r0)),
                         opacity_logit=np.full(count, float(logit(0.5))),
                         sh=sh,
                         mixture_logit=np.zeros((count, n_bases)),
                         albedo_logit=np.zeros((count, 3)),
                         basis_rho_raw=_brdf.unsquash01(np.linspace(0.2, 0.8, n_bases)),
                         basis_sigma_raw=_brdf.unsquash_sigma(np.linspace(0.1, 0.9, n_bases)),
                         basis_m_raw=_brdf.unsquash01(np.full(n_bases, 0.1)),
                         stage="seeded")


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------
#
# Layout: magic "RNSC", uint32 version, uint32 header length, JSON header
# (stage tag, array manifest, optional extras), then raw little-endian
# float64 array bytes in manifest order. Fully deterministic bytes.

_ARRAY_FIELDS = ("center", "quat", "log_scale", "opacity_logit", "sh",
                 "mixture_logit", "albedo_logit", "basis_rho_raw",
                 "basis_sigma_raw", "basis_m_raw")
_OPTIONAL_FIELDS = ("collapsed_sigma", "collapsed_m", "collapsed_rho_nir")


def save_scene(scene: GaussianScene, path, extras: dict[str, np.ndarray] | None = None) -> None:
    """Write a versioned scene checkpoint; extras may carry e.g. an env-map log."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name in _ARRAY_FIELDS:
        arrays.append((name, getattr(scene, name)))
    for name in _OPTIONAL_FIELDS:
        arr = getattr(scene, name)
        if arr is not None:
            arrays.append((name, arr))
    for name, arr in (extras or {}).items():
        arrays.append(("extra:" + name, np.asarray(arr, dtype=np.float64)))

    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays]
    header = json.dumps({"stage": scene.stage, "count": scene.count,
                         "basis_count": scene.basis_count, "arrays": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_scene(path) -> tuple[GaussianScene, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (scene, extras). Raises on corrupt files."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError("not a scene checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        fields: dict[str, np.ndarray] = {}
        extras: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError("truncated checkpoint")
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            name = entry["name"]
            if name.startswith("extra:"):
                extras[name[6:]] = arr
            else:
                fields[name] = arr
    kwargs = {name: fields[name] for name in _ARRAY_FIELDS}
    for name in _OPTIONAL_FIELDS:
        if name in fields:
            kwargs[name] = fields[name]
    scene = GaussianScene(stage=header["stage"], **kwargs)
    return scene, extras
