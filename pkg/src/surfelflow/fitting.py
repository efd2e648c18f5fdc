"""Multi-view splat fitting: Adam on raw (unconstrained) splat parameters
against L1 color plus the depth-distortion and normal-alignment regularizers.

Raw parameterization keeps every invariant intact at each step: centers are
free, scales live in log space, tangent frames come from unnormalized
quaternions, opacity/color from logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalAbort, ValidationError
from .geometry import RenderingInput
from .losses import (
    distortion_loss,
    distortion_loss_grads,
    l1_loss,
    l1_loss_grad,
    normal_loss,
    normal_loss_grads,
)
from .optim import AdamState, adam_step
from .rasterizer import RasterizeOptions, RenderGrads, rasterize, rasterize_backward
from .surfels import SplatScene, frame_grads_to_quat, frame_to_quat, quat_to_frame


@dataclass
class FitOptions:
    iters: int = 2000
    lambda_d: float = 1000.0
    lambda_n: float = 0.2
    lr: dict = field(default_factory=lambda: {
        "center": 5e-4,
        "log_scale": 5e-3,
        "quat": 2e-3,
        "op_logit": 2.5e-2,
        "color_logit": 2.5e-2,
    })
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    log_every: int = 1
    # regularizers stay off until reg_ramp[0] while L1 roughs in the shape,
    # then their weight climbs geometrically from reg_floor to 1 at
    # reg_ramp[1].  A linear ramp fails here: it spends almost no time at
    # small weights, so mid-ramp the geometry gradient dominates every
    # parameter while the depth spread is still large, and the fit leaves the
    # photometric basin for an opaque low-distortion sheet with ruined color.
    # Equal iterations per decade keep the two terms comparable while the
    # spread collapses, so full weight arrives at an already-coherent surface
    reg_ramp: tuple = (500, 2000)
    reg_floor: float = 1e-5

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.iters < 1:
            raise ValidationError(f"iters must be >= 1, got {self.iters}")


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-4, 1.0 - 1e-4)
    return np.log(p / (1.0 - p))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))


def scene_to_params(scene: SplatScene) -> dict[str, np.ndarray]:
    arr = scene.arrays()
    return {
        "center": arr["center"].copy(),
        "log_scale": np.log(np.stack([arr["s_u"], arr["s_v"]], axis=1)),
        "quat": frame_to_quat(arr["t_u"], arr["t_v"], arr["normal"]),
        "op_logit": _logit(arr["opacity"]),
        "color_logit": _logit(arr["color"]),
    }


def params_to_scene(params: dict[str, np.ndarray]) -> SplatScene:
    scales = np.exp(params["log_scale"])
    return SplatScene.from_arrays(
        centers=params["center"], quats=params["quat"],
        s_u=scales[:, 0], s_v=scales[:, 1],
        opacities=_sigmoid(params["op_logit"]),
        colors=_sigmoid(params["color_logit"]))


def fit_loss_and_grads(views: list[RenderingInput], params: dict[str, np.ndarray],
                       opts: FitOptions, reg_scale: float = 1.0):
    """One full evaluation of the fitting objective: renders every view,
    folds the L1 / distortion / normal cotangents through the rasterizer
    backward pass, and chains them onto the raw parameters.  Returns
    (parts, grads) where parts has per-term view-averaged losses; ld and ln
    are logged unweighted while total reflects the objective actually
    optimized (regularizers scaled by reg_scale during warmup)."""
    scene = params_to_scene(params)
    arr = scene.arrays()
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    l1_total = ld_total = ln_total = 0.0
    lam_d = reg_scale * opts.lambda_d
    lam_n = reg_scale * opts.lambda_n

    for view in views:
        out = rasterize(scene, view.pose, view.intrinsics,
                        RasterizeOptions(background=opts.background, retain_record=True))
        l1_total += l1_loss(out.color, view.image)
        ld_total += distortion_loss(out)
        ln_total += normal_loss(out, view.normal)

        ld_w, ld_z = distortion_loss_grads(out)
        ln_w, ln_n = normal_loss_grads(out, view.normal)
        g = RenderGrads(
            color=l1_loss_grad(out.color, view.image),
            hit_w=lam_d * ld_w + lam_n * ln_w,
            hit_depth=lam_d * ld_z,
            splat_normal=lam_n * ln_n,
        )
        raw = rasterize_backward(out.record, g)

        grads["center"] += raw["center"]
        scales = np.stack([arr["s_u"], arr["s_v"]], axis=1)
        grads["log_scale"] += np.stack([raw["s_u"], raw["s_v"]], axis=1) * scales
        grads["quat"] += frame_grads_to_quat(params["quat"], raw["t_u"],
                                             raw["t_v"], raw["normal"])
        op = arr["opacity"]
        grads["op_logit"] += raw["opacity"] * op * (1.0 - op)
        col = arr["color"]
        grads["color_logit"] += raw["color"] * col * (1.0 - col)

    nv = len(views)
    for k in grads:
        grads[k] /= nv
    parts = {
        "l1": l1_total / nv,
        "ld": ld_total / nv,
        "ln": ln_total / nv,
        "total": (l1_total + lam_d * ld_total + lam_n * ln_total) / nv,
    }
    return parts, grads


def fit_splats(views: list[RenderingInput], init: SplatScene,
               opts: Optional[FitOptions] = None):
    """Returns (optimized scene, loss rows). Each row is a dict with keys
    iter, l1, ld, ln, total (loss values averaged over views)."""
    if not views:
        raise ValidationError("fit_splats: need at least one view")
    opts = opts if opts is not None else FitOptions()
    params = scene_to_params(init)
    state = AdamState.init(params)
    rows = []

    lo, hi = opts.reg_ramp
    for it in range(opts.iters):
        if it < lo:
            ramp = 0.0
        elif it >= hi:
            ramp = 1.0
        else:
            ramp = opts.reg_floor ** (1.0 - (it - lo) / (hi - lo))
        parts, grads = fit_loss_and_grads(views, params, opts, reg_scale=ramp)
        if not np.isfinite(parts["total"]):
            raise NumericalAbort(f"fit_splats diverged at iteration {it}")
        params, state = adam_step(params, grads, state, lr=opts.lr)
        if it % opts.log_every == 0 or it == opts.iters - 1:
            rows.append({"iter": it, **parts})

    return params_to_scene(params), rows


def init_scene_from_views(views: list[RenderingInput], n_splats: int,
                          seed: int = 0) -> SplatScene:
    """Seed a scene by farthest-point-sampling unprojected foreground pixels;
    splats start normal-aligned with colors taken from the images."""
    from .geometry import PointCloud, fps_sample, unproject_depth

    pts, cols, nrms = [], [], []
    for v in views:
        x, mask = unproject_depth(v)
        pts.append(x[mask])
        cols.append(v.image[mask])
        nrms.append(v.normal[mask])
    pts = np.concatenate(pts)
    cols = np.concatenate(cols)
    nrms = np.concatenate(nrms)
    if len(pts) < n_splats:
        raise ValidationError(
            f"init needs at least {n_splats} foreground pixels, found {len(pts)}")

    rng = np.random.default_rng(seed)
    if len(pts) > 4096:
        sub = rng.choice(len(pts), 4096, replace=False)
        sub.sort()
        pts, cols, nrms = pts[sub], cols[sub], nrms[sub]

    idx = fps_sample(PointCloud(positions=pts), n_splats)
    centers = pts[idx]
    colors = cols[idx]
    normals = nrms[idx]

    # nearest-neighbor spacing sets the initial footprint; half of it keeps
    # the exp(-rho^2/2) support from flooding the tile binning early on
    d2 = ((centers[:, None] - centers[None, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(d2.min(axis=1))
    scale = np.clip(0.5 * nn, 1e-3, None)

    # build tangent frames around each normal
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, [[0.0, 0, 1]], [[1.0, 0, 0]])
    t_u = np.cross(normals, helper)
    t_u /= np.linalg.norm(t_u, axis=1, keepdims=True)
    t_v = np.cross(normals, t_u)
    t_v /= np.linalg.norm(t_v, axis=1, keepdims=True)
    # frame (t_u, t_v, t_u x t_v) with t_u x t_v = +-normal; sign is irrelevant
    # because the rasterizer flips normals camera-facing
    n_w = np.cross(t_u, t_v)
    quats = frame_to_quat(t_u, t_v, n_w)
    t_u, t_v, _ = quat_to_frame(quats)

    # near-saturated opacity makes the surface hard from the start: a couple
    # of hits drive transmittance under the termination floor, so occluded
    # splats get zero weight and the distortion term cannot feed on
    # front-to-back weight products (its transparent minimum is a fit killer)
    return SplatScene.from_arrays(
        centers=centers, quats=quats, s_u=scale, s_v=scale,
        opacities=np.full(n_splats, 0.95), colors=np.clip(colors, 1e-3, 1 - 1e-3))
