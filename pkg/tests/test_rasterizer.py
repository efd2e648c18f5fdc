"""Rasterizer tests: hand-computed blends, the alpha identity, order
invariance, a finite-difference oracle for the full backward pass, and
hand-evaluated geometry regularizers.

The finite-difference scenes are screened for margin from every
non-smooth boundary (Gaussian support cutoff, termination threshold,
depth-sort ties, near plane) so central differences are valid there.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from surfelflow.errors import ValidationError
from surfelflow.geometry import CameraPose, PinholeIntrinsics, plucker_embed
from surfelflow.losses import (
    distortion_loss,
    distortion_loss_grads,
    l1_loss,
    normal_loss,
    normal_loss_grads,
    psnr,
)
from surfelflow.rasterizer import (
    RasterizeOptions,
    RenderGrads,
    eval_gaussian,
    rasterize,
    rasterize_backward,
    ray_splat_intersect,
)
from surfelflow.surfels import (
    SplatScene,
    SurfelGaussian,
    frame_grads_to_quat,
    frame_to_quat,
    quat_to_frame,
)


def make_splat(center, tu=(1, 0, 0), tv=(0, 1, 0), su=1.0, sv=1.0,
               opacity=0.5, color=(1.0, 0.0, 0.0)):
    return SurfelGaussian(center=np.array(center, dtype=float),
                          t_u=np.array(tu, dtype=float), t_v=np.array(tv, dtype=float),
                          s_u=su, s_v=sv, opacity=opacity,
                          color=np.array(color, dtype=float))


def single_pixel_camera():
    pose = CameraPose(rotation=np.eye(3), origin=np.zeros(3))
    intr = PinholeIntrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5, width=1, height=1)
    return pose, intr


def small_camera(w=16, h=16, f=18.0, dist=3.0):
    pose = CameraPose(rotation=np.eye(3), origin=np.array([0.0, 0.0, -dist]))
    intr = PinholeIntrinsics(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)
    return pose, intr


# ---------------------------------------------------------------------------
# ray-splat intersection

def test_intersect_axis_aligned():
    s = make_splat((0, 0, 0))
    hit = ray_splat_intersect(np.array([0.0, 0, -5]), np.array([0.0, 0, 1]), s)
    assert hit is not None
    u, v, depth = hit
    assert_allclose([u, v], [0.0, 0.0], atol=1e-12)
    assert_allclose(depth, 5.0, atol=1e-12)


def test_intersect_parallel_ray_misses():
    s = make_splat((0, 0, 0))  # plane z=0
    assert ray_splat_intersect(np.array([0.0, 0, 1]), np.array([1.0, 0, 0]), s) is None


def test_intersect_behind_origin_misses():
    s = make_splat((0, 0, -2))
    assert ray_splat_intersect(np.array([0.0, 0, 0]), np.array([0.0, 0, 1]), s) is None


def test_intersect_residual_random():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(200):
        q = rng.standard_normal(4)
        tu, tv, _ = quat_to_frame(q[None])
        s = make_splat(rng.standard_normal(3), tu=tu[0], tv=tv[0],
                       su=float(rng.uniform(0.3, 2)), sv=float(rng.uniform(0.3, 2)))
        o = rng.standard_normal(3) * 3
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        hit = ray_splat_intersect(o, d, s, forward=d)
        if hit is None:
            continue
        hits += 1
        u, v, t = hit  # forward=d means depth is the ray parameter
        residual = o + t * d - (s.center + s.s_u * s.t_u * u + s.s_v * s.t_v * v)
        assert np.abs(residual).max() < 1e-9
    assert hits > 50


def test_eval_gaussian():
    assert eval_gaussian(0.0, 0.0) == 1.0
    assert_allclose(eval_gaussian(1.0, 1.0), np.exp(-1.0), rtol=1e-12)
    assert eval_gaussian(5.0, 5.0) == 0.0  # beyond the support cutoff


# ---------------------------------------------------------------------------
# forward blending

def test_empty_scene_renders_background():
    pose, intr = small_camera(4, 4)
    scene = SplatScene(splats=[])
    out = rasterize(scene, pose, intr, RasterizeOptions(background=np.array([0.2, 0.4, 0.6])))
    assert_allclose(out.color, np.broadcast_to([0.2, 0.4, 0.6], (4, 4, 3)))
    assert_allclose(out.alpha, 0.0)


def test_single_splat_blend():
    pose, intr = single_pixel_camera()
    scene = SplatScene(splats=[make_splat((0, 0, 5), opacity=0.5, color=(1, 0, 0))])
    out = rasterize(scene, pose, intr, RasterizeOptions(background=np.zeros(3)))
    assert_allclose(out.color[0, 0], [0.5, 0.0, 0.0], atol=1e-12)
    assert_allclose(out.alpha[0, 0], 0.5, atol=1e-15)
    assert_allclose(out.depth[0, 0], 5.0, atol=1e-12)


def test_two_splat_hand_blend():
    # front hit a=0.5 then back hit a=1.0, both c=1: 0.5 + 1.0 * 0.5 = 1.0
    pose, intr = single_pixel_camera()
    front = make_splat((0, 0, 5), opacity=0.5, color=(1, 1, 1))
    back = make_splat((0, 0, 6), opacity=1.0, color=(1, 1, 1))
    for order in ([front, back], [back, front]):
        out = rasterize(SplatScene(splats=list(order)), pose, intr,
                        RasterizeOptions(background=np.zeros(3)))
        assert abs(out.color[0, 0, 0] - 1.0) < 1e-12
        assert abs(out.alpha[0, 0] - 1.0) < 1e-12
    # expected depth: (0.5*5 + 0.5*6) / 1.0
    assert_allclose(out.depth[0, 0], 5.5, atol=1e-12)


def test_background_compositing_uses_transmittance():
    pose, intr = single_pixel_camera()
    scene = SplatScene(splats=[make_splat((0, 0, 5), opacity=0.25, color=(1, 0, 0))])
    out = rasterize(scene, pose, intr, RasterizeOptions(background=np.ones(3)))
    assert_allclose(out.color[0, 0], [0.25 + 0.75, 0.75, 0.75], atol=1e-12)


def random_scene(seed, n=5, opacity_range=(0.25, 0.7), spread=0.6):
    rng = np.random.default_rng(seed)
    splats = []
    for _ in range(n):
        q = rng.standard_normal(4)
        q[0] += 2.0  # bias toward camera-facing so footprints stay compact
        tu, tv, _ = quat_to_frame(q[None])
        splats.append(make_splat(
            center=rng.uniform(-spread, spread, 3) * np.array([1, 1, 0.8]),
            tu=tu[0], tv=tv[0],
            su=float(rng.uniform(0.25, 0.5)), sv=float(rng.uniform(0.25, 0.5)),
            opacity=float(rng.uniform(*opacity_range)),
            color=rng.uniform(0.1, 0.9, 3)))
    return SplatScene(splats=splats)


def test_alpha_equals_sum_of_weights_exactly():
    pose, intr = small_camera()
    for seed in range(3):
        scene = random_scene(seed)
        out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
        rec = out.record
        sums = np.zeros(16 * 16)
        np.add.at(sums, np.repeat(np.arange(16 * 16), np.diff(rec.offsets)), rec.w)
        assert (sums.reshape(16, 16) == out.alpha).all()  # bitwise
        assert out.alpha.max() <= 1.0 + 1e-12
        assert out.alpha.min() >= 0.0


def test_splat_order_invariance_bitwise():
    pose, intr = small_camera()
    scene = random_scene(7)
    out1 = rasterize(scene, pose, intr)
    rng = np.random.default_rng(0)
    for _ in range(3):
        perm = rng.permutation(len(scene.splats))
        scene2 = SplatScene(splats=[scene.splats[i] for i in perm])
        out2 = rasterize(scene2, pose, intr)
        assert (out1.color == out2.color).all()
        assert (out1.alpha == out2.alpha).all()
        assert (out1.depth == out2.depth).all()
        assert (out1.normal == out2.normal).all()


def test_rasterize_matches_single_ray_op():
    pose, intr = small_camera(8, 8)
    scene = random_scene(3, n=4)
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    rec = out.record
    p = plucker_embed(pose, intr)
    dirs = p[..., 3:].reshape(-1, 3)
    fwd = pose.rotation[:, 2]
    pixel_of_hit = np.repeat(np.arange(intr.width * intr.height), np.diff(rec.offsets))
    for k in range(len(rec.splat_idx)):
        px = pixel_of_hit[k]
        hit = ray_splat_intersect(pose.origin, dirs[px], scene.splats[rec.splat_idx[k]],
                                  forward=fwd)
        assert hit is not None
        assert_allclose([rec.u[k], rec.v[k], rec.zdepth[k]],
                        [hit[0], hit[1], hit[2]], atol=1e-9)


def test_tiled_matches_untiled():
    pose, intr = small_camera(33, 17, f=20.0)
    scene = random_scene(11, n=8, spread=0.8)
    a = rasterize(scene, pose, intr, RasterizeOptions(tile_size=16))
    b = rasterize(scene, pose, intr, RasterizeOptions(tile_size=64))
    assert (a.color == b.color).all()
    assert (a.alpha == b.alpha).all()


# ---------------------------------------------------------------------------
# backward

def test_occluded_splat_gets_zero_opacity_gradient():
    pose, intr = single_pixel_camera()
    front = make_splat((0, 0, 5), opacity=1.0 - 1e-12, color=(1, 0, 0))
    back = make_splat((0, 0, 6), opacity=0.5, color=(0, 1, 0))
    scene = SplatScene(splats=[front, back])
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    grads = rasterize_backward(out.record, RenderGrads(color=np.ones((1, 1, 3))))
    assert grads["opacity"][1] == 0.0
    assert np.abs(grads["color"][1]).max() == 0.0
    assert grads["opacity"][0] != 0.0


def test_color_gradient_equals_blend_weights():
    pose, intr = small_camera()
    scene = random_scene(2)
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    rec = out.record
    grads = rasterize_backward(rec, RenderGrads(color=np.ones((16, 16, 3))))
    expected = np.zeros(len(scene.splats))
    np.add.at(expected, rec.splat_idx, rec.w)
    assert_allclose(grads["color"], np.stack([expected] * 3, axis=1), rtol=1e-12)


# -- finite-difference oracle --------------------------------------------

def build_scene_from_params(centers, quats, scales, alphas, colors):
    tu, tv, _ = quat_to_frame(quats)
    splats = [
        SurfelGaussian(center=centers[i], t_u=tu[i], t_v=tv[i],
                       s_u=scales[i, 0], s_v=scales[i, 1],
                       opacity=alphas[i], color=colors[i])
        for i in range(len(centers))
    ]
    return SplatScene(splats=splats)


def composite_loss(scene, pose, intr, weights, target_normals):
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    a, b, c, e = weights
    value = float((out.color * a).sum() + (out.alpha * b).sum()
                  + (out.depth * c).sum() + (out.normal * e).sum())
    value += distortion_loss(out)
    value += 0.5 * normal_loss(out, target_normals)
    return value, out


def composite_grads(out, weights, target_normals):
    a, b, c, e = weights
    ld_w, ld_d = distortion_loss_grads(out)
    ln_w, ln_n = normal_loss_grads(out, target_normals)
    g = RenderGrads(color=a, alpha=b, depth=c, normal=e,
                    hit_w=ld_w + 0.5 * ln_w, hit_depth=ld_d,
                    splat_normal=0.5 * ln_n)
    return rasterize_backward(out.record, g)


def blend_structure(params, pose, intr):
    """Discrete blend structure: kept (pixel, splat) hits in depth order plus
    the live mask. The composite loss is smooth wherever this is constant."""
    scene = build_scene_from_params(params["centers"], params["quats"], params["scales"],
                                    params["alphas"], params["colors"])
    rec = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True)).record
    return rec.offsets.copy(), rec.splat_idx.copy(), rec.live.copy()


def fd_window_is_smooth(params, pose, intr, eps_of):
    """True when no FD window of any coordinate crosses a support-cutoff,
    depth-reorder, or termination boundary (structure equal at both ends)."""
    base = blend_structure(params, pose, intr)
    for key, arr0 in params.items():
        eps = eps_of[key]
        flat = arr0.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            for delta in (eps, -eps):
                flat[i] = orig + delta
                sig = blend_structure(params, pose, intr)
                same = all((a.shape == b.shape and (a == b).all()) for a, b in zip(base, sig))
                flat[i] = orig
                if not same:
                    return False
    return True


def test_backward_matches_finite_differences():
    pose, intr = small_camera()
    rng = np.random.default_rng(99)
    weights = (rng.uniform(-1, 1, (16, 16, 3)), rng.uniform(-1, 1, (16, 16)),
               rng.uniform(-0.2, 0.2, (16, 16)), rng.uniform(-1, 1, (16, 16, 3)))
    tn = rng.standard_normal((16, 16, 3))
    tn /= np.linalg.norm(tn, axis=-1, keepdims=True)
    eps_of = {"centers": 1e-4, "scales": 1e-4, "quats": 1e-5, "alphas": 1e-5, "colors": 1e-5}

    checked = 0
    worst = 0.0
    for seed in range(60):
        if checked == 5:
            break
        scene0 = random_scene(seed)

        arr = scene0.arrays()
        quats = frame_to_quat(arr["t_u"], arr["t_v"], arr["normal"])
        params = {
            "centers": arr["center"].copy(),
            "quats": quats.copy(),
            "scales": np.stack([arr["s_u"], arr["s_v"]], axis=1),
            "alphas": arr["opacity"].copy(),
            "colors": arr["color"].copy(),
        }
        if not fd_window_is_smooth(params, pose, intr, eps_of):
            continue
        checked += 1

        def loss_of(p):
            scene = build_scene_from_params(p["centers"], p["quats"], p["scales"],
                                            p["alphas"], p["colors"])
            return composite_loss(scene, pose, intr, weights, tn)[0]

        scene = build_scene_from_params(**params)
        _, out = composite_loss(scene, pose, intr, weights, tn)
        raw = composite_grads(out, weights, tn)
        gq = frame_grads_to_quat(params["quats"], raw["t_u"], raw["t_v"], raw["normal"])
        analytic = {
            "centers": raw["center"],
            "quats": gq,
            "scales": np.stack([raw["s_u"], raw["s_v"]], axis=1),
            "alphas": raw["opacity"],
            "colors": raw["color"],
        }
        for key, arr0 in params.items():
            eps = eps_of[key]
            flat = arr0.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_of(params)
                flat[i] = orig - eps
                lo = loss_of(params)
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                an = analytic[key].reshape(-1)[i]
                rel = abs(an - fd) / max(1.0, abs(an))
                worst = max(worst, rel)
                assert rel < 1e-4, f"seed {seed} {key}[{i}]: analytic {an:.6e} fd {fd:.6e}"
    assert checked == 5, "not enough margin-valid scenes found"


# ---------------------------------------------------------------------------
# geometry regularizers, hand cases

def test_distortion_single_hit_is_zero():
    pose, intr = single_pixel_camera()
    scene = SplatScene(splats=[make_splat((0, 0, 5), opacity=0.5)])
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    assert distortion_loss(out) == 0.0


def test_distortion_hand_value():
    # weights (0.5, 0.5) at depths (5, 6): ordered pairs give 2 * 0.25 * 1 = 0.5
    pose, intr = single_pixel_camera()
    scene = SplatScene(splats=[
        make_splat((0, 0, 5), opacity=0.5),
        make_splat((0, 0, 6), opacity=1.0),
    ])
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    assert_allclose([out.record.w[0], out.record.w[1]], [0.5, 0.5], atol=1e-15)
    assert_allclose(distortion_loss(out), 0.5, atol=1e-12)


def test_distortion_equal_depths_zero():
    pose, intr = single_pixel_camera()
    scene = SplatScene(splats=[
        make_splat((0, 0, 5), opacity=0.5),
        make_splat((0, 0, 5), opacity=0.3),
    ])
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    assert distortion_loss(out) == 0.0


def test_distortion_zero_iff_single_depth():
    pose, intr = small_camera()
    for seed in range(6):
        scene = random_scene(seed)
        out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
        rec = out.record
        pixel_of_hit = np.repeat(np.arange(16 * 16), np.diff(rec.offsets))
        multi = False
        for px in np.unique(pixel_of_hit):
            z = rec.zdepth[(pixel_of_hit == px) & rec.live & (rec.w > 0)]
            if len(np.unique(z)) > 1:
                multi = True
        val = distortion_loss(out)
        assert (val > 0) == multi


def test_normal_loss_aligned_is_zero():
    pose, intr = single_pixel_camera()
    scene = SplatScene(splats=[make_splat((0, 0, 5), opacity=1.0)])
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    # splat plane normal +z faces away from the camera ray (0,0,1); the
    # camera-facing flip makes it -z, so the target is -z
    target = np.zeros((1, 1, 3))
    target[0, 0] = [0, 0, -1]
    assert_allclose(normal_loss(out, target), 0.0, atol=1e-12)


def test_normal_loss_flip_handles_opposite_normal():
    pose, intr = single_pixel_camera()
    tu, tv = (0, 1, 0), (1, 0, 0)  # normal = tu x tv = -z, already camera-facing
    scene = SplatScene(splats=[make_splat((0, 0, 5), tu=tu, tv=tv, opacity=1.0)])
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    target = np.zeros((1, 1, 3))
    target[0, 0] = [0, 0, -1]
    assert_allclose(normal_loss(out, target), 0.0, atol=1e-12)


def test_normal_loss_orthogonal_half_weight():
    pose, intr = single_pixel_camera()
    scene = SplatScene(splats=[make_splat((0, 0, 5), opacity=0.5)])
    out = rasterize(scene, pose, intr, RasterizeOptions(retain_record=True))
    target = np.zeros((1, 1, 3))
    target[0, 0] = [1, 0, 0]
    assert_allclose(normal_loss(out, target), 0.5, atol=1e-12)


def test_l1_and_psnr():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.5)
    assert_allclose(l1_loss(a, b), 0.5)
    assert_allclose(psnr(a, b), -10 * np.log10(0.25))
    assert psnr(a, a) == np.inf
