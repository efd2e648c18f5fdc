"""Render losses, geometry regularizers, and evaluation metrics.

The regularizers operate on the retained per-hit record: the distortion
term pulls a ray's blend weights onto a single depth, the normal term aligns
camera-facing splat normals with a target normal map. Both are averaged
over foreground pixels (accumulated opacity > 0).
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import ValidationError
from .rasterizer import RenderOutput


def _require_record(render: RenderOutput):
    if render.record is None:
        raise ValidationError("loss needs a render with retain_record=True")
    return render.record


@njit(cache=True)
def _distortion_scan(offsets, w, z, live):
    total = 0.0
    npx = offsets.size - 1
    for px in range(npx):
        for i in range(offsets[px], offsets[px + 1]):
            if not live[i]:
                continue
            for j in range(offsets[px], offsets[px + 1]):
                if not live[j]:
                    continue
                total += w[i] * w[j] * abs(z[i] - z[j])
    return total


@njit(cache=True)
def _distortion_grads_scan(offsets, w, z, live, g_w, g_z):
    npx = offsets.size - 1
    for px in range(npx):
        for i in range(offsets[px], offsets[px + 1]):
            if not live[i]:
                continue
            acc_w = 0.0
            acc_z = 0.0
            for j in range(offsets[px], offsets[px + 1]):
                if not live[j]:
                    continue
                dz = z[i] - z[j]
                acc_w += w[j] * abs(dz)
                if dz > 0:
                    acc_z += w[j]
                elif dz < 0:
                    acc_z -= w[j]
            g_w[i] = 2.0 * acc_w
            g_z[i] = 2.0 * w[i] * acc_z


def _foreground_count(record) -> int:
    return int((record.alpha_px > 0).sum())


def distortion_loss(render: RenderOutput) -> float:
    """Mean over foreground pixels of sum_{i,j} w_i w_j |d_i - d_j| over the
    pixel's intersections (ordered pairs)."""
    rec = _require_record(render)
    n_fg = _foreground_count(rec)
    if n_fg == 0:
        return 0.0
    return float(_distortion_scan(rec.offsets, rec.w, rec.zdepth, rec.live) / n_fg)


def distortion_loss_grads(render: RenderOutput):
    """Cotangents (d/dw, d/d zdepth) per hit for distortion_loss."""
    rec = _require_record(render)
    m = len(rec.w)
    g_w = np.zeros(m)
    g_z = np.zeros(m)
    n_fg = _foreground_count(rec)
    if n_fg == 0:
        return g_w, g_z
    _distortion_grads_scan(rec.offsets, rec.w, rec.zdepth, rec.live, g_w, g_z)
    return g_w / n_fg, g_z / n_fg


def _hit_pixel_ids(rec):
    return np.repeat(np.arange(rec.offsets.size - 1, dtype=np.int64), np.diff(rec.offsets))


def normal_loss(render: RenderOutput, target: np.ndarray) -> float:
    """Mean over foreground pixels of sum_i w_i (1 - nhat_i . N(pixel)), with
    splat normals flipped camera-facing (normal . view_dir < 0)."""
    rec = _require_record(render)
    n_fg = _foreground_count(rec)
    if n_fg == 0:
        return 0.0
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    pixel = _hit_pixel_ids(rec)
    nhat = rec.flip[:, None] * rec.scene.arrays()["normal"][rec.splat_idx]
    terms = rec.w * (1.0 - (nhat * target[pixel]).sum(1))
    return float(terms.sum() / n_fg)


def normal_loss_grads(render: RenderOutput, target: np.ndarray):
    """Cotangents (d/dw per hit, d/d splat_normal per splat) for normal_loss."""
    rec = _require_record(render)
    m = len(rec.w)
    n_splats = len(rec.scene.arrays()["opacity"])
    g_w = np.zeros(m)
    g_n = np.zeros((n_splats, 3))
    n_fg = _foreground_count(rec)
    if n_fg == 0:
        return g_w, g_n
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    pixel = _hit_pixel_ids(rec)
    nhat = rec.flip[:, None] * rec.scene.arrays()["normal"][rec.splat_idx]
    g_w = np.where(rec.live, 1.0 - (nhat * target[pixel]).sum(1), 0.0) / n_fg
    contrib = -(rec.flip * rec.w)[:, None] * target[pixel] / n_fg
    g_n = np.stack([np.bincount(rec.splat_idx, weights=contrib[:, c],
                                minlength=n_splats) for c in range(3)], axis=1)
    return g_w, g_n


# ---------------------------------------------------------------------------
# image metrics

def l1_loss(image: np.ndarray, target: np.ndarray) -> float:
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValidationError(f"l1_loss: shape mismatch {image.shape} vs {target.shape}")
    return float(np.abs(image - target).mean())


def l1_loss_grad(image: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.sign(image - target) / image.size


def psnr(image: np.ndarray, target: np.ndarray) -> float:
    """-10 log10(MSE) for values on [0, 1]; infinite for identical images."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValidationError(f"psnr: shape mismatch {image.shape} vs {target.shape}")
    mse = float(((image - target) ** 2).mean())
    if mse == 0.0:
        return np.inf
    return -10.0 * np.log10(mse)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared-Euclidean Chamfer: mean over each set of the
    nearest-neighbor squared distance to the other set, summed both ways."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("chamfer_distance: empty point set")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
