"""Analytic test scenes: a ray-traced two-color sphere for fitting targets,
and toy surface point clouds (sphere / cube / torus) for the generative
pipeline. Everything is deterministic given the seed."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .geometry import CameraPose, PinholeIntrinsics, RenderingInput, look_at_pose, plucker_embed

SPHERE_COLOR_A = np.array([0.85, 0.25, 0.15])
SPHERE_COLOR_B = np.array([0.15, 0.35, 0.85])
WHITE = np.array([1.0, 1.0, 1.0])

SHAPE_KINDS = ("sphere", "cube", "torus")


def sphere_ring_cameras(n_views: int, cam_radius: float = 3.0,
                        width: int = 64, height: int = 64,
                        azimuth_offset: float = 0.0):
    """Evenly spaced azimuths, alternating elevation, all looking at the origin."""
    poses, intrs = [], []
    for i in range(n_views):
        theta = 2.0 * np.pi * i / n_views + azimuth_offset
        phi = 0.35 if i % 2 == 0 else -0.35
        o = cam_radius * np.array([
            np.cos(phi) * np.cos(theta),
            np.cos(phi) * np.sin(theta),
            np.sin(phi),
        ])
        poses.append(look_at_pose(o, np.zeros(3)))
        f = 1.1 * width
        intrs.append(PinholeIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                                       width=width, height=height))
    return poses, intrs


def render_sphere_view(pose: CameraPose, intr: PinholeIntrinsics,
                       radius: float = 1.0) -> RenderingInput:
    """Ray-trace a two-color sphere at the origin over a white background."""
    p = plucker_embed(pose, intr)
    d = p[..., 3:]
    o = pose.origin
    b = d @ o
    disc = b * b - (o @ o - radius * radius)
    hit = disc > 0
    t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), 0.0)
    hit &= t > 0

    x = o + t[..., None] * d
    fwd = pose.rotation[:, 2]
    depth = np.where(hit, t * (d @ fwd), 0.0)
    normal = np.where(hit[..., None], x / radius, 0.0)
    color = np.where((x[..., 0] >= 0)[..., None], SPHERE_COLOR_A, SPHERE_COLOR_B)
    image = np.where(hit[..., None], color, WHITE)
    return RenderingInput(image=image, depth=depth, normal=normal, pose=pose, intrinsics=intr)


def render_sphere_views(n_views: int, width: int = 64, height: int = 64,
                        radius: float = 1.0, cam_radius: float = 3.0,
                        azimuth_offset: float = 0.0) -> list[RenderingInput]:
    poses, intrs = sphere_ring_cameras(n_views, cam_radius, width, height,
                                       azimuth_offset)
    return [render_sphere_view(pose, intr, radius) for pose, intr in zip(poses, intrs)]


def sphere_fit_task(width: int = 64, height: int = 64):
    """The standard sphere-fitting benchmark: 4 training views 90 degrees
    apart and 2 held-out views halfway between neighboring training azimuths,
    so every held-out pixel sees surface covered by some training view."""
    train = render_sphere_views(4, width, height)
    held = render_sphere_views(2, width, height, azimuth_offset=np.pi / 4)
    return train, held


# ---------------------------------------------------------------------------
# toy shape clouds

def sample_shape_cloud(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """n surface points of a canonical shape, inside [-1, 1]^3."""
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return 0.9 * v
    if kind == "cube":
        half = 0.8
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-half, half, (n, 2))
        pts = np.zeros((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        for i in range(n):
            others = [a for a in range(3) if a != axis[i]]
            pts[i, axis[i]] = sign[i] * half
            pts[i, others[0]] = uv[i, 0]
            pts[i, others[1]] = uv[i, 1]
        return pts
    if kind == "torus":
        big, small = 0.65, 0.25
        out = np.zeros((n, 3))
        filled = 0
        while filled < n:
            m = (n - filled) * 2 + 8
            theta = rng.uniform(0, 2 * np.pi, m)
            accept = rng.uniform(0, 1, m) < (big + small * np.cos(theta)) / (big + small)
            theta = theta[accept][: n - filled]
            phi = rng.uniform(0, 2 * np.pi, len(theta))
            ring = big + small * np.cos(theta)
            pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)], axis=1)
            out[filled:filled + len(pts)] = pts
            filled += len(pts)
        return out
    raise ValidationError(f"unknown shape kind {kind!r}, expected one of {SHAPE_KINDS}")


def toy_features(points: np.ndarray) -> np.ndarray:
    """Smooth anchor-dependent features (N, 4); used as the stage-two target
    so feature prediction is impossible without knowing the anchors."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.stack([
        np.sin(np.pi * x),
        np.cos(np.pi * y),
        np.sin(2 * np.pi * z),
        x * y * z,
    ], axis=1)


def make_shape_dataset(n_clouds_per_class: int, points_per_cloud: int, seed: int):
    """Returns (anchors (M, N, 3), features (M, N, C), labels (M,)) over the
    three canonical shape classes."""
    rng = np.random.default_rng(seed)
    anchors, feats, labels = [], [], []
    for label, kind in enumerate(SHAPE_KINDS):
        for _ in range(n_clouds_per_class):
            pts = sample_shape_cloud(kind, points_per_cloud, rng)
            anchors.append(pts)
            feats.append(toy_features(pts))
            labels.append(label)
    return np.stack(anchors), np.stack(feats), np.array(labels)
