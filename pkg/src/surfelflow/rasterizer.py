"""Differentiable surfel rasterizer.

Forward: per pixel, ray-splat intersections are depth-sorted and blended
front to back with volumetric alpha compositing; accumulation stops when
transmittance drops below a floor, and the remainder composites the
background. Backward: analytic gradients for every splat field, derived by
hand from the blend recurrence and the plane-intersection equations.

The per-pixel sequential scans (transmittance chain forward, suffix-sum
backward) run in numba; everything else is vectorized numpy over the flat
hit list. Hit order is deterministic: sorted by (pixel, depth), depth ties
broken by splat list order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .errors import ValidationError
from .geometry import CameraPose, PinholeIntrinsics
from .surfels import SplatScene, SurfelGaussian

SUPPORT_RHO2 = 18.0          # Gaussian support cutoff on u^2 + v^2 (~4.24 sigma)
SUPPORT_RADIUS = float(np.sqrt(SUPPORT_RHO2))
PARALLEL_EPS = 1e-9          # |d . n| below this is a miss
DEFAULT_FLOOR = 1e-4         # transmittance termination


def eval_gaussian(u, v):
    """exp(-(u^2+v^2)/2), cut to exactly zero beyond the support radius."""
    rho = np.asarray(u, dtype=np.float64) ** 2 + np.asarray(v, dtype=np.float64) ** 2
    out = np.where(rho > SUPPORT_RHO2, 0.0, np.exp(-0.5 * np.minimum(rho, SUPPORT_RHO2)))
    return float(out) if out.ndim == 0 else out


def ray_splat_intersect(o: np.ndarray, d: np.ndarray, splat: SurfelGaussian,
                        forward: Optional[np.ndarray] = None, near: float = 1e-4):
    """Solve o + t d = p + s_u t_u u + s_v t_v v by an explicit 3x3 solve.

    Returns (u, v, z-depth) or None. z-depth is t * (d . forward); when no
    camera forward axis is given the ray direction itself is used, making the
    depth the ray parameter t.
    """
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValidationError("ray direction must be unit length")
    n = splat.normal
    if abs(d @ n) < PARALLEL_EPS:
        return None
    m = np.stack([splat.s_u * splat.t_u, splat.s_v * splat.t_v, -d], axis=1)
    u, v, t = np.linalg.solve(m, o - splat.center)
    if t <= near:
        return None
    fwd = d if forward is None else np.asarray(forward, dtype=np.float64)
    return float(u), float(v), float(t * (d @ fwd))


@dataclass
class RasterizeOptions:
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    near: float = 1e-4
    transmittance_floor: float = DEFAULT_FLOOR
    tile_size: int = 16
    retain_record: bool = False

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.tile_size < 1:
            raise ValidationError(f"tile_size must be >= 1, got {self.tile_size}")


@dataclass
class ForwardRecord:
    """Flat per-hit state retained for the backward pass and the geometry
    losses. Hits are grouped per pixel via CSR ``offsets``."""

    scene: SplatScene
    pose: CameraPose
    intr: PinholeIntrinsics
    background: np.ndarray
    offsets: np.ndarray      # (P+1,) int64
    splat_idx: np.ndarray    # (M,)
    u: np.ndarray
    v: np.ndarray
    t: np.ndarray            # ray parameter
    zdepth: np.ndarray
    a: np.ndarray            # alpha * G
    tbefore: np.ndarray      # transmittance before this hit
    w: np.ndarray            # blend weight (0 for terminated hits)
    live: np.ndarray         # bool, False past the termination floor
    flip: np.ndarray         # +-1 camera-facing normal sign
    tend: np.ndarray         # (P,) transmittance after the last live hit
    alpha_px: np.ndarray     # (P,) accumulated opacity
    depth_px: np.ndarray     # (P,) expected depth
    zfac: np.ndarray         # (P,) d . forward per pixel
    dirs: np.ndarray         # (P, 3) unit ray directions


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    record: Optional[ForwardRecord] = None


@dataclass
class RenderGrads:
    """Cotangents for RenderOutput fields plus direct per-hit/per-splat
    cotangents used by the geometry regularizers."""

    color: Optional[np.ndarray] = None      # (H, W, 3)
    alpha: Optional[np.ndarray] = None      # (H, W)
    depth: Optional[np.ndarray] = None      # (H, W)
    normal: Optional[np.ndarray] = None     # (H, W, 3)
    hit_w: Optional[np.ndarray] = None      # (M,) d(loss)/d(blend weight)
    hit_depth: Optional[np.ndarray] = None  # (M,) d(loss)/d(hit z-depth)
    splat_normal: Optional[np.ndarray] = None  # (N, 3)


@njit(cache=True)
def _forward_scan(offsets, a, zdepth, nhat, colors_hit, floor,
                  out_color, out_alpha, out_depthnum, out_normal,
                  tend, w, tbefore, live):
    npx = offsets.size - 1
    for px in range(npx):
        t = 1.0
        for k in range(offsets[px], offsets[px + 1]):
            tbefore[k] = t
            if t < floor:
                live[k] = False
                w[k] = 0.0
                continue
            live[k] = True
            wk = a[k] * t
            w[k] = wk
            out_alpha[px] += wk
            out_depthnum[px] += wk * zdepth[k]
            for c in range(3):
                out_color[px, c] += wk * colors_hit[k, c]
                out_normal[px, c] += wk * nhat[k, c]
            t *= 1.0 - a[k]
        tend[px] = t


@njit(cache=True)
def _backward_scan(offsets, a, w, tbefore, live, tend, g_w, g_tend, g_a):
    # d(loss)/d(a_k) = T_k g_w[k] - S / (1 - a_k), with S the suffix sum
    # of w_j g_w[j] over later live hits plus T_end g_tend
    npx = offsets.size - 1
    for px in range(npx):
        s = tend[px] * g_tend[px]
        for k in range(offsets[px + 1] - 1, offsets[px] - 1, -1):
            if not live[k]:
                g_a[k] = 0.0
                continue
            om = 1.0 - a[k]
            if om < 1e-14:
                om = 1e-14
            g_a[k] = tbefore[k] * g_w[k] - s / om
            s += w[k] * g_w[k]


@njit(cache=True)
def _intersect_candidates(pix_ids, splat_ids, dirs, zfac, origin, centers,
                          normals, t_us, t_vs, s_us, s_vs, opacities, near,
                          u, v, t, den, zdepth, a, keep):
    """Fused per-candidate plane intersection + support test. Arithmetic
    mirrors the vector form exactly (3-term dot products left to right)."""
    for k in range(pix_ids.size):
        p = pix_ids[k]
        s = splat_ids[k]
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        nx, ny, nz = normals[s, 0], normals[s, 1], normals[s, 2]
        dn = dx * nx + dy * ny + dz * nz
        keep[k] = False
        if not (abs(dn) >= PARALLEL_EPS):
            continue
        rx = centers[s, 0] - origin[0]
        ry = centers[s, 1] - origin[1]
        rz = centers[s, 2] - origin[2]
        tt = (rx * nx + ry * ny + rz * nz) / dn
        if not (tt > near):
            continue
        qx = tt * dx - rx
        qy = tt * dy - ry
        qz = tt * dz - rz
        uu = (qx * t_us[s, 0] + qy * t_us[s, 1] + qz * t_us[s, 2]) / s_us[s]
        vv = (qx * t_vs[s, 0] + qy * t_vs[s, 1] + qz * t_vs[s, 2]) / s_vs[s]
        rho = uu * uu + vv * vv
        if not (rho <= SUPPORT_RHO2):
            continue
        keep[k] = True
        u[k] = uu
        v[k] = vv
        t[k] = tt
        den[k] = dn
        zdepth[k] = tt * zfac[p]
        a[k] = opacities[s] * np.exp(-0.5 * rho)


def _unit_ray_dirs(pose: CameraPose, intr: PinholeIntrinsics):
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    dirs = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs.reshape(-1, 3)


def _candidate_pairs(arr, pose, intr, tile):
    """Conservative (pixel, splat) candidates from projected splat corners.

    The splat's Gaussian support is an ellipse inside the corner rectangle;
    a planar convex region projects to a convex quad, so the corners' pixel
    bounding box (padded by one pixel) covers every possible hit.
    """
    w, h = intr.width, intr.height
    n = len(arr["center"])
    eu = (SUPPORT_RADIUS * arr["s_u"])[:, None] * arr["t_u"]
    ev = (SUPPORT_RADIUS * arr["s_v"])[:, None] * arr["t_v"]
    corners = arr["center"][:, None, :] + np.stack(
        [eu + ev, eu - ev, -eu + ev, -eu - ev], axis=1)   # (N, 4, 3)
    cam = (corners - pose.origin) @ pose.rotation          # (N, 4, 3)
    z = cam[..., 2]
    near = 1e-4

    behind = z <= near
    all_behind = behind.all(axis=1)
    any_behind = behind.any(axis=1)
    zsafe = np.where(behind, 1.0, z)  # masked rows never use these bounds
    px = intr.fx * cam[..., 0] / zsafe + intr.cx
    py = intr.fy * cam[..., 1] / zsafe + intr.cy
    x0 = np.maximum(np.floor(px.min(axis=1)).astype(np.int64) - 1, 0)
    x1 = np.minimum(np.ceil(px.max(axis=1)).astype(np.int64) + 1, w - 1)
    y0 = np.maximum(np.floor(py.min(axis=1)).astype(np.int64) - 1, 0)
    y1 = np.minimum(np.ceil(py.max(axis=1)).astype(np.int64) + 1, h - 1)
    span = any_behind & ~all_behind  # crosses the near plane: full screen
    x0[span], y0[span] = 0, 0
    x1[span], y1[span] = w - 1, h - 1
    keep = ~all_behind & (x0 <= x1) & (y0 <= y1)

    tiles_x = (w + tile - 1) // tile
    tiles_y = (h + tile - 1) // tile
    tile_splats: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    for i in np.flatnonzero(keep):
        for ty in range(y0[i] // tile, y1[i] // tile + 1):
            for tx in range(x0[i] // tile, x1[i] // tile + 1):
                tile_splats[ty * tiles_x + tx].append(i)

    pix_parts, splat_parts = [], []
    grid = np.arange(w * h, dtype=np.int64).reshape(h, w)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            splats = tile_splats[ty * tiles_x + tx]
            if not splats:
                continue
            pix = grid[ty * tile:(ty + 1) * tile, tx * tile:(tx + 1) * tile].reshape(-1)
            s = np.asarray(splats, dtype=np.int64)
            pix_parts.append(np.repeat(pix, len(s)))
            splat_parts.append(np.tile(s, len(pix)))
    if not pix_parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(pix_parts), np.concatenate(splat_parts)


def rasterize(scene: SplatScene, pose: CameraPose, intr: PinholeIntrinsics,
              opts: Optional[RasterizeOptions] = None) -> RenderOutput:
    opts = opts if opts is not None else RasterizeOptions()
    w_img, h_img = intr.width, intr.height
    npx = w_img * h_img
    dirs = _unit_ray_dirs(pose, intr)
    fwd = pose.rotation[:, 2]
    zfac = dirs @ fwd
    arr = scene.arrays()

    if len(scene.splats) == 0:
        pix_ids = np.zeros(0, dtype=np.int64)
        splat_ids = np.zeros(0, dtype=np.int64)
    else:
        pix_ids, splat_ids = _candidate_pairs(arr, pose, intr, opts.tile_size)

    if len(pix_ids):
        nc = len(pix_ids)
        u, v, t = np.zeros(nc), np.zeros(nc), np.zeros(nc)
        den, zdepth, a = np.zeros(nc), np.zeros(nc), np.zeros(nc)
        keepm = np.zeros(nc, dtype=np.bool_)
        _intersect_candidates(pix_ids, splat_ids, dirs, zfac, pose.origin,
                              arr["center"], arr["normal"], arr["t_u"],
                              arr["t_v"], arr["s_u"], arr["s_v"],
                              arr["opacity"], opts.near,
                              u, v, t, den, zdepth, a, keepm)
        pix_k = pix_ids[keepm]
        splat_k = splat_ids[keepm]
        u, v, t, den = u[keepm], v[keepm], t[keepm], den[keepm]
        zdepth, a = zdepth[keepm], a[keepm]

        order = np.lexsort((zdepth, pix_k))
        pix_k, splat_k = pix_k[order], splat_k[order]
        u, v, t, den, zdepth, a = u[order], v[order], t[order], den[order], zdepth[order], a[order]
        flip = np.where(den < 0.0, 1.0, -1.0)
        offsets = np.zeros(npx + 1, dtype=np.int64)
        np.cumsum(np.bincount(pix_k, minlength=npx), out=offsets[1:])
    else:
        pix_k = splat_k = np.zeros(0, dtype=np.int64)
        u = v = t = den = zdepth = a = flip = np.zeros(0)
        offsets = np.zeros(npx + 1, dtype=np.int64)

    nhat = flip[:, None] * arr["normal"][splat_k] if len(splat_k) else np.zeros((0, 3))
    colors_hit = arr["color"][splat_k] if len(splat_k) else np.zeros((0, 3))

    out_color = np.zeros((npx, 3))
    out_alpha = np.zeros(npx)
    out_depthnum = np.zeros(npx)
    out_normal = np.zeros((npx, 3))
    tend = np.ones(npx)
    wgt = np.zeros(len(a))
    tbefore = np.ones(len(a))
    live = np.zeros(len(a), dtype=np.bool_)
    _forward_scan(offsets, a, zdepth, np.ascontiguousarray(nhat),
                  np.ascontiguousarray(colors_hit), opts.transmittance_floor,
                  out_color, out_alpha, out_depthnum, out_normal,
                  tend, wgt, tbefore, live)

    color = out_color + tend[:, None] * opts.background
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(out_alpha > 0, out_depthnum / np.where(out_alpha > 0, out_alpha, 1.0), 0.0)

    record = None
    if opts.retain_record:
        record = ForwardRecord(
            scene=scene, pose=pose, intr=intr, background=opts.background,
            offsets=offsets, splat_idx=splat_k, u=u, v=v, t=t, zdepth=zdepth,
            a=a, tbefore=tbefore, w=wgt, live=live, flip=flip, tend=tend,
            alpha_px=out_alpha, depth_px=depth, zfac=zfac, dirs=dirs)

    return RenderOutput(
        color=color.reshape(h_img, w_img, 3),
        alpha=out_alpha.reshape(h_img, w_img),
        depth=depth.reshape(h_img, w_img),
        normal=out_normal.reshape(h_img, w_img, 3),
        record=record,
    )


def rasterize_backward(record: ForwardRecord, grads: RenderGrads) -> dict[str, np.ndarray]:
    """Analytic gradients for every splat field.

    Returns arrays keyed center/t_u/t_v/normal/s_u/s_v/opacity/color; the
    tangent-frame entries chain into quaternion space via
    ``surfels.frame_grads_to_quat``.
    """
    if record is None:
        raise ValidationError("rasterize_backward: forward record was not retained")
    rec = record
    arr = rec.scene.arrays()
    n_splats = len(arr["opacity"])
    npx = rec.offsets.size - 1
    m = len(rec.splat_idx)

    def flat(x, shape):
        return np.zeros(shape) if x is None else np.asarray(x, dtype=np.float64).reshape(shape)

    g_color_px = flat(grads.color, (npx, 3))
    g_alpha_px = flat(grads.alpha, (npx,))
    g_depth_px = flat(grads.depth, (npx,))
    g_normal_px = flat(grads.normal, (npx, 3))
    g_hit_w = flat(grads.hit_w, (m,))
    g_hit_depth = flat(grads.hit_depth, (m,))

    pixel = np.repeat(np.arange(npx, dtype=np.int64), np.diff(rec.offsets))
    colors_hit = arr["color"][rec.splat_idx]
    nhat = rec.flip[:, None] * arr["normal"][rec.splat_idx]

    # fold every output channel into per-hit weight/depth cotangents
    g_w = (colors_hit * g_color_px[pixel]).sum(1) + g_alpha_px[pixel] + g_hit_w
    g_w += (nhat * g_normal_px[pixel]).sum(1)
    alpha_safe = np.where(rec.alpha_px > 0, rec.alpha_px, 1.0)
    fg = rec.alpha_px[pixel] > 0
    g_w += np.where(fg, g_depth_px[pixel] * (rec.zdepth - rec.depth_px[pixel]) / alpha_safe[pixel], 0.0)
    g_z = np.where(fg, g_depth_px[pixel] * rec.w / alpha_safe[pixel], 0.0) + g_hit_depth
    g_z = np.where(rec.live, g_z, 0.0)
    g_tend = g_color_px @ rec.background

    g_a = np.zeros(m)
    _backward_scan(rec.offsets, rec.a, rec.w, rec.tbefore, rec.live, rec.tend,
                   g_w, g_tend, g_a)

    # chain through a = alpha * G(u, v) and the plane intersection
    op_hit = arr["opacity"][rec.splat_idx]
    gauss_val = np.where(op_hit > 0, rec.a / op_hit, 0.0)   # G per hit
    g_opacity_hit = gauss_val * g_a
    g_gauss = op_hit * g_a
    g_u = g_gauss * (-rec.u * gauss_val)
    g_v = g_gauss * (-rec.v * gauss_val)

    d = rec.dirs[pixel]
    nrm = arr["normal"][rec.splat_idx]
    den = (d * nrm).sum(1)
    r = arr["center"][rec.splat_idx] - rec.pose.origin
    q = rec.t[:, None] * d - r
    su = arr["s_u"][rec.splat_idx]
    sv = arr["s_v"][rec.splat_idx]
    tu = arr["t_u"][rec.splat_idx]
    tv = arr["t_v"][rec.splat_idx]

    g_t = g_z * rec.zfac[pixel]
    dldq = g_u[:, None] * tu / su[:, None] + g_v[:, None] * tv / sv[:, None]
    g_t_total = g_t + (dldq * d).sum(1)
    dldr = -dldq + g_t_total[:, None] * nrm / den[:, None]
    g_n_hit = g_t_total[:, None] * (-q) / den[:, None]
    # normal-map channel reaches the splat normal directly through nhat
    g_n_hit += rec.flip[:, None] * rec.w[:, None] * g_normal_px[pixel]

    def scatter(vals):
        # bincount walks hits in order, so per-splat sums accumulate exactly
        # like an unbuffered indexed add
        if vals.ndim == 1:
            return np.bincount(rec.splat_idx, weights=vals, minlength=n_splats)
        return np.stack([np.bincount(rec.splat_idx, weights=vals[:, c],
                                     minlength=n_splats)
                         for c in range(vals.shape[1])], axis=1)

    out = {
        "center": scatter(dldr),
        "t_u": scatter(g_u[:, None] * q / su[:, None]),
        "t_v": scatter(g_v[:, None] * q / sv[:, None]),
        "normal": scatter(g_n_hit),
        "s_u": scatter(-g_u * rec.u / su),
        "s_v": scatter(-g_v * rec.v / sv),
        "opacity": scatter(g_opacity_hit),
        "color": scatter(rec.w[:, None] * g_color_px[pixel]),
    }
    if grads.splat_normal is not None:
        out["normal"] += np.asarray(grads.splat_normal, dtype=np.float64)
    return out
