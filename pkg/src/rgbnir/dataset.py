"""Capture-set I/O: PFM images, camera poses, flash metadata, previews.

Directory layout of a capture set::

    root/
      poses.json            intrinsics + world-to-camera pose per view
      flash.json            camera-frame flash offset and intensity
      view_0000/
        rgb.pfm             linear RGB under ambient light
        nir_on.pfm          NIR with flash firing
        nir_off.pfm         NIR without flash
        mask.pfm            binary object mask (values 0 or 1)
      view_0001/ ...

PFM files follow the usual convention (rows bottom-up, negative scale means
little-endian); in memory everything is top-down float64. Data written by
:func:`save_pfm` survives a load/save cycle bit-for-bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Camera, FlashModel, SpectralImage, gamma_encode


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def load_pfm(path) -> np.ndarray:
    """Read a PFM file -> (H, W) or (H, W, 3) float64, rows top-down."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM dimensions line")
        width, height = int(dims[0]), int(dims[1])
        if width <= 0 or height <= 0:
            raise ValueError(f"{path}: invalid PFM dimensions {width}x{height}")
        scale = float(fh.readline().strip())
        little_endian = scale < 0.0
        count = width * height * channels
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype="<f4" if little_endian else ">f4")
    data = data.astype(np.float64).reshape(height, width, channels)
    data = data[::-1]  # PFM stores rows bottom-up
    if abs(scale) not in (0.0, 1.0):
        data = data * abs(scale)
    return data[:, :, 0] if channels == 1 else data


def save_pfm(path, array: np.ndarray) -> None:
    """Write (H, W) or (H, W, 3) data as little-endian PFM (scale -1)."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"PFM supports 1 or 3 channels, got shape {array.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("PFM payload must be finite")
    header = b"PF\n" if arr.shape[2] == 3 else b"Pf\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# PNG preview (8-bit, gamma 2.2); minimal encoder, no external deps
# ---------------------------------------------------------------------------

def save_png_preview(path, image: np.ndarray) -> None:
    """Tone-map linear radiance to an 8-bit sRGB-ish preview PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    data = (gamma_encode(arr[:, :, :3]) * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    raw = b"".join(b"\x00" + data[y].tobytes() for y in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", ihdr))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# Flash differencing
# ---------------------------------------------------------------------------

def flash_subtract(nir_on: SpectralImage, nir_off: SpectralImage) -> SpectralImage:
    """Flash-only NIR image: clamp(nir_on - nir_off, 0). Ambient light cancels."""
    if nir_on.data.shape != nir_off.data.shape:
        raise ValueError("flash on/off image shapes differ")
    return SpectralImage(np.maximum(nir_on.data - nir_off.data, 0.0))


def apply_mask(image: SpectralImage, mask: np.ndarray) -> SpectralImage:
    """Zero out pixels outside the binary mask (idempotent)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != image.data.shape[:2]:
        raise ValueError("mask shape does not match image")
    return SpectralImage(image.data * m[:, :, None], allow_negative=image.allow_negative)


# ---------------------------------------------------------------------------
# Capture sets
# ---------------------------------------------------------------------------

@dataclass
class CaptureView:
    name: str
    camera: Camera
    rgb: SpectralImage
    nir_on: SpectralImage
    nir_off: SpectralImage
    nir_flash_only: SpectralImage   # nir_on - nir_off, clamped at 0
    mask: np.ndarray                # (H, W) of {0, 1}
    flash: FlashModel


@dataclass
class CaptureSet:
    views: list[CaptureView]

    @property
    def count(self) -> int:
        return len(self.views)


def write_poses(path, cameras: list[Camera], names: list[str]) -> None:
    views = []
    for cam, name in zip(cameras, names):
        views.append({"name": name, "fx": cam.fx, "fy": cam.fy,
                      "cx": cam.cx, "cy": cam.cy,
                      "rotation": cam.rotation.tolist(),
                      "translation": cam.translation.tolist(),
                      "width": cam.width, "height": cam.height})
    with open(path, "w") as fh:
        json.dump({"views": views}, fh, sort_keys=True, indent=1)


def write_flash(path, flash: FlashModel) -> None:
    with open(path, "w") as fh:
        json.dump({"offset": flash.offset.tolist(), "intensity": flash.intensity},
                  fh, sort_keys=True, indent=1)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"capture set is missing {path}")
    return path


def load_capture_set(root) -> CaptureSet:
    """Load and validate a capture set; computes the flash-only NIR per view."""
    root = Path(root)
    with open(_require(root / "poses.json")) as fh:
        poses = json.load(fh)
    with open(_require(root / "flash.json")) as fh:
        fdata = json.load(fh)
    flash = FlashModel(offset=np.array(fdata["offset"]), intensity=fdata["intensity"])

    views: list[CaptureView] = []
    for entry in poses["views"]:
        cam = Camera(fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
                     rotation=np.array(entry["rotation"]),
                     translation=np.array(entry["translation"]),
                     width=entry["width"], height=entry["height"])
        vdir = root / entry["name"]
        rgb = load_pfm(_require(vdir / "rgb.pfm"))
        nir_on = load_pfm(_require(vdir / "nir_on.pfm"))
        nir_off = load_pfm(_require(vdir / "nir_off.pfm"))
        mask = load_pfm(_require(vdir / "mask.pfm"))
        if rgb.ndim != 3:
            raise ValueError(f"{vdir}: rgb.pfm must have three channels")
        for img, nm in ((nir_on, "nir_on"), (nir_off, "nir_off"), (mask, "mask")):
            if img.shape[:2] != rgb.shape[:2]:
                raise ValueError(f"{vdir}: {nm}.pfm dimensions disagree with rgb.pfm")
        if (rgb.shape[0], rgb.shape[1]) != (cam.height, cam.width):
            raise ValueError(f"{vdir}: image dimensions disagree with poses.json")
        if not np.all(np.isin(mask, (0.0, 1.0))):
            raise ValueError(f"{vdir}: mask is not binary")
        on_img = SpectralImage(nir_on[:, :, None])
        off_img = SpectralImage(nir_off[:, :, None])
        views.append(CaptureView(
            name=entry["name"], camera=cam,
            rgb=SpectralImage(rgb),
            nir_on=on_img, nir_off=off_img,
            nir_flash_only=flash_subtract(on_img, off_img),
            mask=mask, flash=flash))
    if not views:
        raise ValueError(f"{root}: capture set contains no views")
    return CaptureSet(views=views)
