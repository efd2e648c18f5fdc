"""Finite-difference verification suites behind the gradcheck command.

Three layers get checked against central differences: the tape engine's ops,
the rasterizer's hand-written backward (through the geometry regularizers),
and a small two-layer denoiser driven end to end through the tape. All three
report a max relative error under |analytic - numeric| / max(1, |analytic|),
the same normalization tensor.grad_check uses.
"""

import numpy as np

from .geometry import CameraPose, PinholeIntrinsics
from .losses import distortion_loss, distortion_loss_grads, normal_loss, normal_loss_grads
from .nets import DenoiserConfig, denoiser_forward, init_denoiser, pack_params, unpack_params
from .rasterizer import RasterizeOptions, RenderGrads, rasterize, rasterize_backward
from .surfels import SplatScene, SurfelGaussian, frame_grads_to_quat, frame_to_quat, quat_to_frame
from .tensor import (
    Tensor, add, concat, div, exp, grad_check, l2_normalize, layer_norm, log,
    matmul, mean, mul, narrow, reshape, sigmoid, softmax, sqrt, sub, sum as tsum,
    tanh, transpose,
)


def autodiff_suite(eps: float = 1e-4):
    """grad_check over one scalar probe per op family. Returns
    [(name, max_rel_error)]."""
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) + 3.0    # keep div/log/sqrt off their poles
    m = rng.standard_normal((4, 5))
    w = rng.standard_normal((2, 3, 4))

    cases = [
        ("add", lambda x: mean(add(x, Tensor(b))), a),
        ("sub", lambda x: mean(sub(x, Tensor(b))), a),
        ("mul", lambda x: mean(mul(x, Tensor(b))), a),
        ("div", lambda x: mean(div(x, Tensor(b))), a),
        ("exp", lambda x: mean(exp(x)), a),
        ("log", lambda x: mean(log(x)), b),
        ("sqrt", lambda x: mean(sqrt(x)), b),
        ("tanh", lambda x: mean(tanh(x)), a),
        ("sigmoid", lambda x: mean(sigmoid(x)), a),
        ("sum", lambda x: tsum(mul(x, x)), a),
        ("mean_axis", lambda x: tsum(mean(x, axis=1)), a),
        ("matmul", lambda x: mean(matmul(x, Tensor(m))), a),
        ("batched_matmul", lambda x: mean(matmul(x, Tensor(m))), w),
        ("softmax", lambda x: mean(mul(softmax(x), Tensor(b))), a),
        ("layer_norm", lambda x: mean(mul(layer_norm(x), Tensor(b))), a),
        ("l2_normalize", lambda x: mean(mul(l2_normalize(x), Tensor(b))), a),
        ("transpose", lambda x: mean(mul(transpose(x, (1, 0)), Tensor(m[:4, :3]))), a),
        ("reshape", lambda x: mean(mul(reshape(x, (12,)), Tensor(b.reshape(12)))), a),
        ("concat", lambda x: mean(concat([x, Tensor(b)], axis=0)), a),
        ("narrow", lambda x: mean(narrow(x, 1, 1, 2)), a),
    ]
    return [(name, grad_check(f, x, eps=eps)) for name, f, x in cases]


# ---------------------------------------------------------------------------
# rasterizer backward vs central differences

def _camera(w=16, h=16):
    pose = CameraPose(rotation=np.eye(3), origin=np.array([0.0, 0.0, -3.0]))
    intr = PinholeIntrinsics(fx=18.0, fy=18.0, cx=w / 2.0, cy=h / 2.0,
                             width=w, height=h)
    return pose, intr


def _random_scene(seed, n=5):
    rng = np.random.default_rng(seed)
    splats = []
    for _ in range(n):
        q = rng.standard_normal(4)
        q[0] += 2.0
        tu, tv, _ = quat_to_frame(q[None])
        splats.append(SurfelGaussian(
            center=rng.uniform(-0.6, 0.6, 3) * np.array([1, 1, 0.8]),
            t_u=tu[0], t_v=tv[0],
            s_u=float(rng.uniform(0.25, 0.5)), s_v=float(rng.uniform(0.25, 0.5)),
            opacity=float(rng.uniform(0.25, 0.7)),
            color=rng.uniform(0.1, 0.9, 3)))
    return SplatScene(splats=splats)


def _scene_of(p):
    tu, tv, _ = quat_to_frame(p["quats"])
    return SplatScene(splats=[
        SurfelGaussian(center=p["centers"][i], t_u=tu[i], t_v=tv[i],
                       s_u=p["scales"][i, 0], s_v=p["scales"][i, 1],
                       opacity=p["alphas"][i], color=p["colors"][i])
        for i in range(len(p["centers"]))])


def _loss_and_render(p, pose, intr, weights, tn):
    out = rasterize(_scene_of(p), pose, intr, RasterizeOptions(retain_record=True))
    ca, ab, dp, nm = weights
    val = float((out.color * ca).sum() + (out.alpha * ab).sum()
                + (out.depth * dp).sum() + (out.normal * nm).sum())
    val += distortion_loss(out) + 0.5 * normal_loss(out, tn)
    return val, out


def _structure(p, pose, intr):
    rec = rasterize(_scene_of(p), pose, intr,
                    RasterizeOptions(retain_record=True)).record
    return rec.offsets, rec.splat_idx, rec.live


def _smooth_window(p, pose, intr, eps_of):
    """The composite loss is piecewise smooth; reject scenes whose FD window
    crosses a support-cutoff, reorder, or termination boundary."""
    base = _structure(p, pose, intr)
    for key, arr in p.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            for delta in (eps_of[key], -eps_of[key]):
                flat[i] = orig + delta
                sig = _structure(p, pose, intr)
                flat[i] = orig
                if not all(x.shape == y.shape and (x == y).all()
                           for x, y in zip(base, sig)):
                    return False
    return True


def rasterizer_suite(n_scenes: int = 5, eps: float = 1e-4):
    """Max relative FD error of the full backward over margin-screened random
    scenes. Returns (max_rel_error, scenes_checked)."""
    pose, intr = _camera()
    rng = np.random.default_rng(99)
    weights = (rng.uniform(-1, 1, (16, 16, 3)), rng.uniform(-1, 1, (16, 16)),
               rng.uniform(-0.2, 0.2, (16, 16)), rng.uniform(-1, 1, (16, 16, 3)))
    tn = rng.standard_normal((16, 16, 3))
    tn /= np.linalg.norm(tn, axis=-1, keepdims=True)
    eps_of = {"centers": eps, "scales": eps,
              "quats": eps / 10, "alphas": eps / 10, "colors": eps / 10}

    worst = 0.0
    checked = 0
    for seed in range(60):
        if checked == n_scenes:
            break
        arr = _random_scene(seed).arrays()
        p = {"centers": arr["center"].copy(),
             "quats": frame_to_quat(arr["t_u"], arr["t_v"], arr["normal"]),
             "scales": np.stack([arr["s_u"], arr["s_v"]], axis=1),
             "alphas": arr["opacity"].copy(),
             "colors": arr["color"].copy()}
        if not _smooth_window(p, pose, intr, eps_of):
            continue
        checked += 1

        _, out = _loss_and_render(p, pose, intr, weights, tn)
        ld_w, ld_d = distortion_loss_grads(out)
        ln_w, ln_n = normal_loss_grads(out, tn)
        raw = rasterize_backward(out.record, RenderGrads(
            color=weights[0], alpha=weights[1], depth=weights[2], normal=weights[3],
            hit_w=ld_w + 0.5 * ln_w, hit_depth=ld_d, splat_normal=0.5 * ln_n))
        analytic = {
            "centers": raw["center"],
            "quats": frame_grads_to_quat(p["quats"], raw["t_u"], raw["t_v"], raw["normal"]),
            "scales": np.stack([raw["s_u"], raw["s_v"]], axis=1),
            "alphas": raw["opacity"],
            "colors": raw["color"],
        }
        for key, arr0 in p.items():
            h = eps_of[key]
            flat = arr0.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = _loss_and_render(p, pose, intr, weights, tn)[0]
                flat[i] = orig - h
                lo = _loss_and_render(p, pose, intr, weights, tn)[0]
                flat[i] = orig
                fd = (hi - lo) / (2 * h)
                an = analytic[key].reshape(-1)[i]
                worst = max(worst, abs(an - fd) / max(1.0, abs(an)))
    return worst, checked


def denoiser_suite(eps: float = 1e-5) -> float:
    """FD check of a two-layer denoiser end to end through the tape: flatten
    every parameter into one vector and grad_check the velocity residual."""
    cfg = DenoiserConfig(layers=2, heads=2, width=8)
    params = init_denoiser(cfg, in_dim=3, num_classes=2, seed=0)
    rng = np.random.default_rng(1)
    # zero-init gates and output projections block gradient flow; wake them
    params = {k: v + 0.25 * rng.standard_normal(v.shape) for k, v in params.items()}
    vec, template = pack_params(params)
    z_t = rng.standard_normal((5, 3))
    target = rng.standard_normal((5, 3))

    def f(x):
        p = unpack_params(x, template)
        v = denoiser_forward(p, z_t, 0.45, 1, cfg)
        r = sub(v, Tensor(target))
        return mean(mul(r, r))

    return grad_check(f, vec, eps=eps)


def run_all(eps: float = 1e-4, threshold: float = 1e-4):
    """Every suite with its max relative error; passed iff all < threshold."""
    ad = autodiff_suite(eps=eps)
    ad_worst = max(err for _, err in ad)
    ad_name = max(ad, key=lambda kv: kv[1])[0]
    ras_worst, scenes = rasterizer_suite(eps=eps)
    den_worst = denoiser_suite(eps=min(eps, 1e-5))
    report = [
        {"suite": "autodiff", "max_rel_error": ad_worst, "worst_op": ad_name,
         "cases": len(ad)},
        {"suite": "rasterizer", "max_rel_error": ras_worst, "scenes": scenes},
        {"suite": "denoiser", "max_rel_error": den_worst},
    ]
    for row in report:
        row["passed"] = bool(row["max_rel_error"] < threshold)
    return report
