"""Cameras, ray embeddings, depth unprojection, and point-cloud utilities.

Conventions fixed across the package: pixel centers sit at (u + 0.5, v + 0.5),
depth maps store z-depth (distance along the camera forward axis, not ray
length), and camera rotations are world-from-camera with columns
[right, down, forward].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError


@dataclass
class CameraPose:
    """World-from-camera rotation and camera origin in world units."""

    rotation: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValidationError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-9:
            raise ValidationError(f"rotation must have det +1, got {det:.12f}")
        if not np.isfinite(self.origin).all():
            raise ValidationError("camera origin must be finite")


@dataclass
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValidationError("image dimensions must be positive")
        self.width = int(self.width)
        self.height = int(self.height)


@dataclass
class RenderingInput:
    """One posed view: RGB in [0,1], z-depth (0 = background), unit normal map
    (zero on background), plus the camera."""

    image: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    pose: CameraPose
    intrinsics: PinholeIntrinsics

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.image.shape != (h, w, 3):
            raise ValidationError(f"image shape {self.image.shape} != ({h}, {w}, 3)")
        if self.depth.shape != (h, w):
            raise ValidationError(f"depth shape {self.depth.shape} != ({h}, {w})")
        if self.normal.shape != (h, w, 3):
            raise ValidationError(f"normal shape {self.normal.shape} != ({h}, {w}, 3)")
        if not np.isfinite(self.depth).all():
            raise ValidationError("depth must be finite everywhere")
        if self.depth.min() < 0:
            raise ValidationError("depth must be nonnegative (0 marks background)")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError("image values must lie in [0, 1]")
        norms = np.linalg.norm(self.normal, axis=-1)
        fg = self.depth > 0
        if fg.any() and np.abs(norms[fg] - 1.0).max() > 1e-6:
            raise ValidationError("foreground normals must have unit length (within 1e-6)")
        if (~fg).any() and norms[~fg].max() > 1e-6:
            raise ValidationError("background normals must be zero")


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) < 1:
            raise ValidationError(f"positions must be (N>=1, 3), got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise ValidationError("positions must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.positions.shape:
                raise ValidationError(
                    f"colors shape {self.colors.shape} != positions shape {self.positions.shape}"
                )


def look_at_pose(origin, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose looking from origin toward target; forward = camera +z."""
    origin = np.asarray(origin, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - origin
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValidationError("look_at_pose: origin and target coincide")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    if np.linalg.norm(right) < 1e-9:  # forward parallel to up; pick another up
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return CameraPose(rotation=rot, origin=origin)


def _pixel_dirs_cam(intr: PinholeIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame directions through pixel centers, (H, W, 3)
    with z = 1."""
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def plucker_embed(pose: CameraPose, intr: PinholeIntrinsics) -> np.ndarray:
    """Per-pixel Plücker ray coordinates (H, W, 6): [o x d, d], d unit."""
    dirs = _pixel_dirs_cam(intr) @ pose.rotation.T
    d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    m = np.cross(np.broadcast_to(pose.origin, d.shape), d)
    return np.concatenate([m, d], axis=-1)


def unproject_depth(r: RenderingInput) -> tuple[np.ndarray, np.ndarray]:
    """World positions (H, W, 3) for each pixel plus a validity mask.

    Background pixels (depth 0) map to the camera origin with mask False.
    """
    dirs = _pixel_dirs_cam(r.intrinsics)  # z-component 1, so scaling by
    x_cam = dirs * r.depth[..., None]     # z-depth lands on the surface
    x = x_cam @ r.pose.rotation.T + r.pose.origin
    mask = r.depth > 0
    x = np.where(mask[..., None], x, r.pose.origin)
    return x, mask


def assemble_view_tensor(r: RenderingInput) -> np.ndarray:
    """Concatenate [image, unprojected xyz, normal, Plücker] into (H, W, 15).

    Unprojected positions are zeroed on background so empty views carry no
    spurious geometry.
    """
    x, mask = unproject_depth(r)
    p = plucker_embed(r.pose, r.intrinsics)
    return np.concatenate([r.image, x * mask[..., None], r.normal, p], axis=-1)


def fps_sample(pc: PointCloud, n: int) -> list[int]:
    """Farthest point sampling. Starts at index 0; each pick maximizes the
    min Euclidean distance to the chosen set, ties broken by lowest index."""
    pts = pc.positions
    count = len(pts)
    if not 1 <= n <= count:
        raise ValidationError(f"fps_sample: n={n} outside [1, {count}]")
    chosen = [0]
    mind = np.linalg.norm(pts - pts[0], axis=1)
    mind[0] = -1.0  # never re-pick
    for _ in range(n - 1):
        nxt = int(np.argmax(mind))  # argmax takes the first max: lowest index
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
        mind[nxt] = -1.0
    return chosen


def fourier_pe(x: np.ndarray, num_bands: int) -> np.ndarray:
    """Fourier features [x, sin(2^k pi x), cos(2^k pi x)] for k < num_bands.

    Inputs must be normalized positions; anything outside [-1.5, 1.5]
    indicates a missing bounding-box normalization and is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValidationError(f"fourier_pe: expected (N, 3) positions, got {x.shape}")
    if num_bands < 1:
        raise ValidationError(f"fourier_pe: num_bands must be >= 1, got {num_bands}")
    if np.abs(x).max() > 1.5:
        raise ValidationError(
            f"fourier_pe: positions reach {np.abs(x).max():.3f}, outside [-1.5, 1.5]; "
            "normalize into [-1, 1]^3 first"
        )
    feats = [x]
    for k in range(num_bands):
        scaled = (2.0 ** k) * np.pi * x
        feats.append(np.sin(scaled))
        feats.append(np.cos(scaled))
    return np.concatenate(feats, axis=1)


def normalize_to_unit_box(points: np.ndarray, bbox: Optional[tuple] = None):
    """Affine map of points into [-1, 1]^3 using an axis-aligned bounding box.

    Returns (normalized, (lo, hi)). Degenerate axes (zero extent) map to 0.
    """
    points = np.asarray(points, dtype=np.float64)
    if bbox is None:
        lo, hi = points.min(axis=0), points.max(axis=0)
    else:
        lo = np.asarray(bbox[0], dtype=np.float64)
        hi = np.asarray(bbox[1], dtype=np.float64)
    extent = hi - lo
    safe = np.where(extent > 1e-9, extent, 1.0)
    out = 2.0 * (points - lo) / safe - 1.0
    out = np.where(extent > 1e-9, out, 0.0)
    return out, (lo, hi)
