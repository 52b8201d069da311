"""Image I/O, colorimetry, bicubic resampling, augmentation, patch pairs.

Luminance images ("ImageY") are 2-D float64 arrays in [0,1].  The bicubic
resampler follows the convention of the standard SR evaluation stack: Keys
cubic kernel with a = -0.5, separable passes, source coordinates clamped at
the borders, and the kernel widened by the scale ratio when downscaling
(antialiasing).  Reproducing published bicubic-baseline PSNR numbers depends
on all four of those choices.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import Tensor

ARCHIVE_MAGIC = b"DRFP"
ARCHIVE_VERSION = 1


class ArchiveFormatError(ValueError):
    pass


# --- colorimetry -----------------------------------------------------------

# ITU-R BT.601 studio-swing YCbCr, the convention of the SR literature.
_Y_COEF = np.array([65.481, 128.553, 24.966]) / 255.0
_CB_COEF = np.array([-37.797, -74.203, 112.0]) / 255.0
_CR_COEF = np.array([112.0, -93.786, -18.214]) / 255.0


def rgb_to_luminance(rgb) -> np.ndarray:
    """8-bit RGB (h,w,3) -> luminance in [0,1] via BT.601 luma."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = rgb @ _Y_COEF + 16.0
    return np.clip(y / 255.0, 0.0, 1.0)


def rgb_to_ycbcr(rgb):
    """8-bit RGB (h,w,3) -> (y, cb, cr) float channels on the 0..255 scale."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = rgb @ _Y_COEF + 16.0
    cb = rgb @ _CB_COEF + 128.0
    cr = rgb @ _CR_COEF + 128.0
    return y, cb, cr


def ycbcr_to_rgb(y, cb, cr):
    """Inverse of rgb_to_ycbcr; returns uint8 (h,w,3)."""
    y = (np.asarray(y, dtype=np.float64) - 16.0) / 219.0
    cb = (np.asarray(cb, dtype=np.float64) - 128.0) / 224.0
    cr = (np.asarray(cr, dtype=np.float64) - 128.0) / 224.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    rgb = np.stack([r, g, b], axis=-1) * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


# --- bicubic resampling -----------------------------------------------------


def _keys_kernel(x):
    """Cubic convolution kernel of Keys with a = -0.5, support [-2, 2]."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = 1.5 * ax3 - 2.5 * ax2 + 1.0
    far = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def _contributions(in_len, out_len):
    """Per output sample: clamped source indices and normalized weights."""
    scale = out_len / in_len
    if scale < 1.0:
        # widen the kernel by 1/scale so downscaling low-pass filters
        kernel_scale = scale
        width = 4.0 / scale
    else:
        kernel_scale = 1.0
        width = 4.0
    u = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2.0)
    p = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(p)
    weights = _keys_kernel((u[:, None] - idx) * kernel_scale) * kernel_scale
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1).astype(np.intp)
    return idx, weights


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of a [0,1] luminance image; output clamped."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    idx, w = _contributions(img.shape[0], out_h)
    img = np.einsum("op,opw->ow", w, img[idx, :])
    idx, w = _contributions(img.shape[1], out_w)
    img = np.einsum("op,hop->ho", w, img[:, idx])
    return np.clip(img, 0.0, 1.0)


# --- augmentation and patches -----------------------------------------------


def augment_eightfold(img: np.ndarray):
    """The 8 orientation variants: 4 rotations x {identity, horizontal flip}."""
    out = []
    for r in range(4):
        rot = np.rot90(img, r)
        out.append(rot.copy())
        out.append(np.fliplr(rot).copy())
    return out


@dataclass
class PatchPair:
    lr: Tensor  # (1,1,p,p)
    hr: Tensor  # (1,1,scale*p,scale*p)


def extract_patch_pairs(hr: np.ndarray, scale: int, lr_patch: int, stride: int):
    """Crop hr to a multiple of scale, bicubic-downscale it, then take aligned
    LR/HR patch pairs on a stride grid.  Images too small yield an empty list."""
    h = (hr.shape[0] // scale) * scale
    w = (hr.shape[1] // scale) * scale
    if h == 0 or w == 0:
        return []
    hr = hr[:h, :w]
    lr = bicubic_resize(hr, h // scale, w // scale)
    pairs = []
    p = lr_patch
    for y in range(0, lr.shape[0] - p + 1, stride):
        for x in range(0, lr.shape[1] - p + 1, stride):
            lr_patch_img = lr[y : y + p, x : x + p]
            hy, hx, hp = y * scale, x * scale, p * scale
            hr_patch_img = hr[hy : hy + hp, hx : hx + hp]
            pairs.append(
                PatchPair(
                    lr=lr_patch_img.astype(np.float32)[None, None],
                    hr=hr_patch_img.astype(np.float32)[None, None],
                )
            )
    return pairs


# --- patch archives ----------------------------------------------------------


def save_archive(path, pairs, scale: int, lr_patch: int):
    """Write pairs as one binary archive (interleaved LR/HR float32 payloads)."""
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<III", ARCHIVE_VERSION, scale, lr_patch))
        f.write(struct.pack("<Q", len(pairs)))
        for pair in pairs:
            f.write(np.ascontiguousarray(pair.lr, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(pair.hr, dtype="<f4").tobytes())


def load_archive(path):
    """Read a patch archive; returns (pairs, scale, lr_patch)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != ARCHIVE_MAGIC:
        raise ArchiveFormatError("bad archive magic")
    if len(data) < 24:
        raise ArchiveFormatError("truncated archive header")
    version, scale, lr_patch = struct.unpack("<III", data[4:16])
    if version != ARCHIVE_VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    (count,) = struct.unpack("<Q", data[16:24])
    p = lr_patch
    lr_n = p * p
    hr_n = (p * scale) ** 2
    pair_bytes = 4 * (lr_n + hr_n)
    if len(data) - 24 != count * pair_bytes:
        raise ArchiveFormatError(
            f"archive payload is {len(data) - 24} bytes, expected {count * pair_bytes}"
        )
    pairs = []
    pos = 24
    for _ in range(count):
        lr = np.frombuffer(data, dtype="<f4", count=lr_n, offset=pos).reshape(1, 1, p, p)
        pos += 4 * lr_n
        hp = p * scale
        hr = np.frombuffer(data, dtype="<f4", count=hr_n, offset=pos).reshape(1, 1, hp, hp)
        pos += 4 * hr_n
        pairs.append(PatchPair(lr=lr.copy(), hr=hr.copy()))
    return pairs, scale, lr_patch


# --- image files --------------------------------------------------------------


def load_image_rgb(path) -> np.ndarray:
    """Decode an image file to uint8 RGB (h,w,3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_image_y(path) -> np.ndarray:
    """Decode to luminance in [0,1].  Grayscale files map 0..255 -> 0..1
    directly; color files go through BT.601 luma."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            return arr / 255.0
        return rgb_to_luminance(np.asarray(im.convert("RGB")))


def save_image_y(path, img: np.ndarray):
    """Write a [0,1] luminance image as 8-bit grayscale (PNG or PGM by suffix)."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if str(path).lower().endswith(".pgm"):
        save_pgm(path, arr)
    else:
        Image.fromarray(arr, mode="L").save(path)


def save_image_rgb(path, rgb: np.ndarray):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def save_pgm(path, arr: np.ndarray):
    """Binary PGM (P5), 8-bit; dependency-free fixture format."""
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.astype(np.uint8).tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM file: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    return np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)


def list_images(directory):
    exts = (".png", ".pgm", ".bmp", ".ppm")
    names = [n for n in sorted(os.listdir(directory)) if n.lower().endswith(exts)]
    return [os.path.join(directory, n) for n in names]
