"""PSNR and SSIM under the standard super-resolution evaluation protocol:
luminance channel, `scale` pixels shaved from every border, dataset means."""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data
from .tensor import ShapeError

#: PSNR reported for identical images (MSE would be zero).
PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def shave_border(img: np.ndarray, pixels: int) -> np.ndarray:
    if pixels == 0:
        return img
    h, w = img.shape
    if 2 * pixels >= min(h, w):
        raise ShapeError(f"cannot shave {pixels} px from a {h}x{w} image")
    return img[pixels:-pixels, pixels:-pixels]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/mse) on [0,1] images; +inf for identical inputs."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation with a 1-D window g on both axes."""
    k = len(g)
    h, w = img.shape
    s0, s1 = img.strides
    cols = np.lib.stride_tricks.as_strided(img, (h, w - k + 1, k), (s0, s1, s1))
    img = np.ascontiguousarray(cols @ g)
    s0, s1 = img.strides
    rows = np.lib.stride_tricks.as_strided(img, (h - k + 1, img.shape[1], k), (s0, s1, s0))
    return rows @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM: 11x11 Gaussian window, sigma 1.5, K1/K2 = 0.01/0.03,
    dynamic range 1.0 (the Wang et al. formulation on [0,1] luminance)."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim: image {a.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    g = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    per_image: list  # (name, psnr, ssim)
    mean_psnr: float
    mean_ssim: float
    scale: int
    shave: int
    missing: list = field(default_factory=list)  # names lacking a counterpart
    failed: list = field(default_factory=list)  # (name, reason)

    @property
    def clean(self):
        return not self.missing and not self.failed

    def to_text(self):
        lines = [f"{'image':<28}{'psnr_db':>10}{'ssim':>10}"]
        for name, p, s in self.per_image:
            lines.append(f"{name:<28}{p:>10.4f}{s:>10.4f}")
        lines.append(f"{'MEAN':<28}{self.mean_psnr:>10.4f}{self.mean_ssim:>10.4f}")
        for name in self.missing:
            lines.append(f"MISSING {name}")
        for name, reason in self.failed:
            lines.append(f"FAILED {name}: {reason}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        lines = ["name,psnr,ssim"]
        for name, p, s in self.per_image:
            lines.append(f"{name},{p!r},{s!r}")
        lines.append(f"MEAN,{self.mean_psnr!r},{self.mean_ssim!r}")
        return "\n".join(lines) + "\n"


def evaluate_pair(sr_img: np.ndarray, gt_img: np.ndarray, shave: int):
    sr_img = shave_border(sr_img, shave)
    gt_img = shave_border(gt_img, shave)
    return psnr(sr_img, gt_img), ssim(sr_img, gt_img)


def evaluate_dataset(sr_dir, gt_dir, scale: int) -> EvalReport:
    """Per matching filename: luminance, shave by `scale`, PSNR + SSIM.
    Files without a counterpart or that fail to decode are listed and
    excluded from the means."""
    sr_names = {os.path.basename(p): p for p in data.list_images(sr_dir)}
    gt_names = {os.path.basename(p): p for p in data.list_images(gt_dir)}
    per_image = []
    failed = []
    missing = sorted(set(sr_names) ^ set(gt_names))
    for name in sorted(set(sr_names) & set(gt_names)):
        try:
            sr_img = data.load_image_y(sr_names[name])
            gt_img = data.load_image_y(gt_names[name])
            p, s = evaluate_pair(sr_img, gt_img, shave=scale)
        except Exception as e:  # decode or shape failure: report, keep going
            failed.append((name, f"{type(e).__name__}: {e}"))
            continue
        per_image.append((name, p, s))
    mean_psnr = float(np.mean([p for _, p, _ in per_image])) if per_image else math.nan
    mean_ssim = float(np.mean([s for _, _, s in per_image])) if per_image else math.nan
    return EvalReport(
        per_image=per_image,
        mean_psnr=mean_psnr,
        mean_ssim=mean_ssim,
        scale=scale,
        shave=scale,
        missing=missing,
        failed=failed,
    )
