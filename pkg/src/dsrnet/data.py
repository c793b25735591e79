"""Image I/O, luma conversion, bicubic degradation, pairing and patch sampling.

Images carry an f64 working representation in [0, 1]; 8-bit views are
derived by rounding, which is also where the pipeline quantizes synthetic
low-resolution images so they match what an 8-bit PNG on disk would hold.
The resampler follows the convention used to generate the standard SR
benchmark LR sets: separable Keys cubic (a = -0.5), kernel widened by the
scale factor when downscaling (antialiasing), edges clamped, weights
normalized per output pixel.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

# Studio-range luma coefficients; full-range BT.601 kept behind a flag.
_Y_STUDIO = (65.481, 128.553, 24.966, 16.0)
_Y_FULL = (76.245, 149.685, 29.07, 0.0)


@dataclass
class Image:
    """Pixel data as (h, w, c) float64 in [0, 1], c in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w, c) with c in {{1, 3}}, got {self.data.shape}")
        self.data = np.asarray(self.data, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_uint8(self) -> np.ndarray:
        return np.rint(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Image":
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(arr.astype(np.float64) / 255.0)

    @classmethod
    def from_float(cls, arr: np.ndarray, quantize: bool = False) -> "Image":
        img = cls(np.clip(arr, 0.0, 1.0))
        return cls.from_uint8(img.to_uint8()) if quantize else img

    def quantized(self) -> "Image":
        """Snap to the 8-bit grid, as a PNG round trip would."""
        return Image.from_uint8(self.to_uint8())


@dataclass
class ImagePair:
    """Aligned LR/HR pair with provenance."""

    lr: Image
    hr: Image
    scale: int
    hr_path: str = ""
    lr_path: str = ""

    def __post_init__(self):
        if self.hr.width != self.lr.width * self.scale or self.hr.height != self.lr.height * self.scale:
            raise ValueError(
                f"pair misaligned for scale {self.scale}: lr {self.lr.width}x{self.lr.height}, "
                f"hr {self.hr.width}x{self.hr.height}"
            )


def load_png(path) -> Image:
    try:
        with PILImage.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im)
            elif im.mode in ("RGB", "RGBA", "P"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise ValueError(f"{path}: unsupported image mode {im.mode!r} (8-bit L/RGB only)")
    except FileNotFoundError:
        raise FileNotFoundError(f"image not found: {path}") from None
    except UnidentifiedImageError as e:
        raise ValueError(f"{path}: not a readable image ({e})") from None
    return Image.from_uint8(arr)


def save_png(img: Image, path) -> None:
    arr = img.to_uint8()
    if arr.shape[2] == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def luma(img: Image, full_range: bool = False) -> np.ndarray:
    """Y channel as (h, w) float64 in [0, 1]."""
    if img.channels == 1:
        return img.data[:, :, 0]
    cr, cg, cb, off = _Y_FULL if full_range else _Y_STUDIO
    r, g, b = img.data[:, :, 0], img.data[:, :, 1], img.data[:, :, 2]
    return (off + cr * r + cg * g + cb * b) / 255.0


def rgb_to_y(img: Image, full_range: bool = False) -> Image:
    if img.channels != 3:
        raise ValueError(f"rgb_to_y expects 3 channels, got {img.channels}")
    return Image(luma(img, full_range=full_range)[:, :, None])


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------


def keys_cubic(x: np.ndarray) -> np.ndarray:
    """Piecewise cubic interpolation kernel with a = -0.5; k(0)=1, k(1)=k(2)=0."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1.0)
    far = (-0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0) * ((ax > 1.0) & (ax <= 2.0))
    return near + far


def _contributions(in_len: int, out_len: int, antialias: bool):
    """Weights and clamped source indices for one resampled axis."""
    scale = out_len / in_len
    if scale < 1.0 and antialias:
        width = 4.0 / scale

        def kern(x):
            return scale * keys_cubic(scale * x)
    else:
        width = 4.0
        kern = keys_cubic
    # 1-based center positions: output pixel x samples input coordinate u.
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - width / 2.0)
    p = int(np.ceil(width)) + 2
    indices = left[:, None] + np.arange(p, dtype=np.float64)[None, :]
    weights = kern(u[:, None] - indices)
    weights /= weights.sum(axis=1, keepdims=True)
    indices = np.clip(indices - 1, 0, in_len - 1).astype(np.int64)  # clamp-to-edge
    return weights, indices


def _resample_axis0(data: np.ndarray, out_len: int, antialias: bool) -> np.ndarray:
    weights, indices = _contributions(data.shape[0], out_len, antialias)
    gathered = data[indices]  # (out_len, p, w, c)
    return np.einsum("op,opwc->owc", weights, gathered, optimize=True)


def bicubic_resize(img: Image, out_w: int, out_h: int, antialias: bool = True) -> Image:
    """Separable bicubic resample to (out_w, out_h); antialiased on downscale."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dims must be >= 1, got ({out_w}, {out_h})")
    data = img.data
    if out_h != img.height:
        data = _resample_axis0(data, out_h, antialias)
    if out_w != img.width:
        data = _resample_axis0(data.transpose(1, 0, 2), out_w, antialias).transpose(1, 0, 2)
    return Image(np.clip(data, 0.0, 1.0))


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

IMAGE_EXTS = (".png", ".PNG")


def center_crop_to_multiple(img: Image, s: int) -> Image:
    h = (img.height // s) * s
    w = (img.width // s) * s
    if h < s or w < s:
        raise ValueError(f"image {img.width}x{img.height} too small for scale {s}")
    top = (img.height - h) // 2
    left = (img.width - w) // 2
    return Image(img.data[top:top + h, left:left + w])


def list_images(directory) -> list[str]:
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(IMAGE_EXTS))
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset directory not found: {directory}") from None
    if not names:
        raise ValueError(f"no PNG images in {directory}")
    return [os.path.join(directory, n) for n in names]


def _find_paired_lr(lr_dir: str, hr_path: str, s: int) -> str:
    name = os.path.basename(hr_path)
    stem, ext = os.path.splitext(name)
    for candidate in (name, f"{stem}x{s}{ext}"):
        path = os.path.join(lr_dir, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no LR image matching {name!r} in {lr_dir}")


def make_pairs(hr_dir, s: int, lr_dir=None) -> list[ImagePair]:
    """Pair every HR image with a synthetic (or pre-generated) LR counterpart.

    HR images are center-cropped to dims divisible by s; synthetic LR is the
    antialiased bicubic downscale quantized to the 8-bit grid.  Ordering is
    deterministic by filename.
    """
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    pairs = []
    for hr_path in list_images(hr_dir):
        hr = center_crop_to_multiple(load_png(hr_path), s)
        if lr_dir is not None:
            lr_path = _find_paired_lr(lr_dir, hr_path, s)
            lr = load_png(lr_path)
        else:
            lr_path = ""
            lr = bicubic_resize(hr, hr.width // s, hr.height // s).quantized()
        pairs.append(ImagePair(lr=lr, hr=hr, scale=s, hr_path=str(hr_path), lr_path=lr_path))
    return pairs


def write_manifest(pairs: list[ImagePair], path) -> None:
    """CSV of (hr_path, lr_path, scale)."""
    import csv

    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["hr_path", "lr_path", "scale"])
        for pr in pairs:
            writer.writerow([pr.hr_path, pr.lr_path, pr.scale])


def _chw(img: Image) -> np.ndarray:
    return img.data.transpose(2, 0, 1)


def sample_patches(pairs: list[ImagePair], patch_hr: int, batch: int, rng: Rng,
                   dtype=np.float32) -> tuple[Tensor, Tensor]:
    """Draw aligned random LR/HR patch pairs as (lr_batch, hr_batch) tensors.

    HR positions are restricted to multiples of the scale so lr[y, x] maps
    exactly onto hr[s*y, s*x].  The HR patch side is floored to a multiple of
    the scale.  Images too small for the patch are skipped with a warning.
    """
    if not pairs:
        raise ValueError("no image pairs to sample from")
    s = pairs[0].scale
    ph = (patch_hr // s) * s
    if ph < s:
        raise ValueError(f"patch_hr {patch_hr} too small for scale {s}")
    pl = ph // s
    usable = []
    for pr in pairs:
        if pr.lr.height < pl or pr.lr.width < pl:
            log.warning("skipping %s: LR %dx%d smaller than patch %d",
                        pr.hr_path or "<image>", pr.lr.width, pr.lr.height, pl)
            continue
        usable.append(pr)
    if not usable:
        raise ValueError(f"every image is smaller than the {pl}x{pl} LR patch")

    lr_out = np.empty((batch, pairs[0].lr.channels, pl, pl), dtype=dtype)
    hr_out = np.empty((batch, pairs[0].hr.channels, ph, ph), dtype=dtype)
    picks = rng.integers(0, len(usable), size=batch)
    for b in range(batch):
        pr = usable[int(picks[b])]
        ly = int(rng.integers(0, pr.lr.height - pl + 1))
        lx = int(rng.integers(0, pr.lr.width - pl + 1))
        hy, hx = ly * s, lx * s
        lr_out[b] = _chw(pr.lr)[:, ly:ly + pl, lx:lx + pl]
        hr_out[b] = _chw(pr.hr)[:, hy:hy + ph, hx:hx + ph]
    return Tensor(lr_out), Tensor(hr_out)


def image_to_tensor(img: Image, dtype=np.float32) -> Tensor:
    return Tensor(_chw(img)[None].astype(dtype))


def tensor_to_image(t: Tensor, index: int = 0) -> Image:
    return Image.from_float(t.data[index].transpose(1, 2, 0).astype(np.float64))
