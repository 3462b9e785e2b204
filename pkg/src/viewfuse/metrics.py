"""Image fidelity metrics: PSNR, SSIM, the 3x3 blur baseline, set evaluation.

PSNR is measured on [0, 1] float images (MAX = 1) and capped at a 99 dB
sentinel for identical inputs. SSIM follows the original formulation with
an 11x11 Gaussian window (sigma 1.5) and constants C1 = 0.01^2, C2 = 0.03^2,
averaged over valid windows and channels. A perceptual metric can be plugged
in as a callable taking two images and returning a scalar (lower better);
no pretrained network ships with the package.
"""

from __future__ import annotations

import csv
import importlib.util
import logging
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .images import load_image

log = logging.getLogger(__name__)

__all__ = [
    "PSNR_CAP_DB",
    "psnr",
    "ssim",
    "gaussian_blur_3x3",
    "evaluate_set",
    "write_metric_table",
    "load_metric_plugin",
]

PSNR_CAP_DB = 99.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels."""
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean local structural similarity over valid windows and channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError(f"image smaller than the {window_size}x{window_size} window")
    kernel = _gaussian_window(window_size, sigma)

    def filt(x):
        return convolve2d(x, kernel, mode="valid")

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = filt(x)
        mu_y = filt(y)
        sig_x = filt(x * x) - mu_x ** 2
        sig_y = filt(y * y) - mu_y ** 2
        sig_xy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sig_x + sig_y + c2)
        scores.append((num / den).mean())
    return float(np.mean(scores))


def gaussian_blur_3x3(image) -> np.ndarray:
    """Separable [1, 2, 1]/4 blur per axis with reflected edges."""
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    padded = np.pad(arr, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    out = (padded[:-2] * k[0] + padded[1:-1] * k[1] + padded[2:] * k[2])
    out = (out[:, :-2] * k[0] + out[:, 1:-1] * k[1] + out[:, 2:] * k[2])
    return out[..., 0] if squeeze else out


def load_metric_plugin(path):
    """Load a metric plugin from a python file.

    The file must expose ``compute(a, b) -> float`` (images in [0, 1],
    lower = more similar) and may set ``METRIC_NAME``.
    """
    path = Path(path)
    spec = importlib.util.spec_from_file_location(f"viewfuse_plugin_{path.stem}", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "compute"):
        raise ValueError(f"metric plugin {path} does not define compute(a, b)")
    name = getattr(module, "METRIC_NAME", path.stem)
    return name, module.compute


def evaluate_set(pred_dir, gt_dir, plugins: dict | None = None,
                 blur: bool = False) -> tuple[list[dict], dict]:
    """Per-image metric rows plus their means for filename-matched pairs.

    Unmatched filenames are reported and skipped; evaluation proceeds on the
    intersection. With ``blur`` on, extra columns measure a 3x3 Gaussian
    blurred copy of each prediction.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    preds = {p.name: p for p in sorted(pred_dir.iterdir()) if p.suffix.lower() in exts}
    gts = {p.name: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in exts}
    common = sorted(preds.keys() & gts.keys())
    missing = sorted(preds.keys() ^ gts.keys())
    if missing:
        log.warning("evaluate_set: %d unmatched filenames skipped: %s",
                    len(missing), ", ".join(missing[:8]))
    if not common:
        raise ValueError(f"no matching image pairs between {pred_dir} and {gt_dir}")

    rows = []
    for name in common:
        pred = load_image(preds[name]).astype(np.float64)
        gt = load_image(gts[name]).astype(np.float64)
        row = {"image": name, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
        if blur:
            blurred = gaussian_blur_3x3(pred)
            row["psnr_blur"] = psnr(blurred, gt)
            row["ssim_blur"] = ssim(blurred, gt)
        for metric_name, fn in (plugins or {}).items():
            row[metric_name] = float(fn(pred, gt))
        rows.append(row)
    keys = [k for k in rows[0] if k != "image"]
    means = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return rows, means


def write_metric_table(path, rows: list[dict], means: dict) -> None:
    """CSV with one row per image plus a final mean row."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                             for k, v in row.items()})
        writer.writerow({"image": "mean", **{k: f"{v:.6f}" for k, v in means.items()}})
