"""Surfel (2D Gaussian) primitives.

A splat is a planar Gaussian patch: center p, orthonormal tangents t_u/t_v
scaled by (s_u, s_v), opacity, and constant RGB. The tangent frame is
materialized from a unit quaternion during optimization so orthonormality
holds exactly at every step; the dataclass stores the frame explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError


@dataclass
class SurfelGaussian:
    center: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    s_u: float
    s_v: float
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.t_u = np.asarray(self.t_u, dtype=np.float64).reshape(3)
        self.t_v = np.asarray(self.t_v, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.s_u = float(self.s_u)
        self.s_v = float(self.s_v)
        self.opacity = float(self.opacity)
        if abs(np.linalg.norm(self.t_u) - 1) > 1e-6 or abs(np.linalg.norm(self.t_v) - 1) > 1e-6:
            raise ValidationError("tangents must be unit vectors (within 1e-6)")
        if abs(self.t_u @ self.t_v) > 1e-6:
            raise ValidationError("tangents must be orthogonal (within 1e-6)")
        if self.s_u <= 0 or self.s_v <= 0:
            raise ValidationError(f"scales must be positive, got ({self.s_u}, {self.s_v})")
        # opacity 1.0 is admitted for hand-constructed fully opaque splats;
        # decoded splats always land strictly inside (0, 1)
        if not 0 < self.opacity <= 1:
            raise ValidationError(f"opacity must lie in (0, 1], got {self.opacity}")
        if self.color.min() < 0 or self.color.max() > 1:
            raise ValidationError("color must lie in [0, 1]")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.t_u, self.t_v)


@dataclass
class SplatScene:
    splats: list
    bbox: Optional[tuple] = field(default=None)

    def __post_init__(self):
        self._arrays = None
        if not self.splats:
            if self.bbox is None:
                self.bbox = (np.zeros(3), np.zeros(3))
            return
        centers = np.stack([s.center for s in self.splats])
        max_scale = max(max(s.s_u, s.s_v) for s in self.splats)
        if self.bbox is None:
            pad = 3.0 * max_scale
            self.bbox = (centers.min(axis=0) - pad, centers.max(axis=0) + pad)
        else:
            lo = np.asarray(self.bbox[0], dtype=np.float64)
            hi = np.asarray(self.bbox[1], dtype=np.float64)
            pad = 3.0 * max_scale
            if (centers < lo - pad).any() or (centers > hi + pad).any():
                raise ValidationError(
                    "splat centers fall outside the scene bounding box "
                    "(inflated by 3x the max scale)"
                )
            self.bbox = (lo, hi)

    def arrays(self) -> dict[str, np.ndarray]:
        """Struct-of-arrays view used by the rasterizer; cached."""
        if self._arrays is None:
            s = self.splats
            tu = np.stack([x.t_u for x in s]) if s else np.zeros((0, 3))
            tv = np.stack([x.t_v for x in s]) if s else np.zeros((0, 3))
            self._arrays = {
                "center": np.stack([x.center for x in s]) if s else np.zeros((0, 3)),
                "t_u": tu,
                "t_v": tv,
                "normal": np.cross(tu, tv) if s else np.zeros((0, 3)),
                "s_u": np.array([x.s_u for x in s]),
                "s_v": np.array([x.s_v for x in s]),
                "opacity": np.array([x.opacity for x in s]),
                "color": np.stack([x.color for x in s]) if s else np.zeros((0, 3)),
            }
        return self._arrays

    @classmethod
    def from_arrays(cls, centers, quats, s_u, s_v, opacities, colors, bbox=None):
        """Vectorized constructor: validates whole arrays at once and skips
        the per-splat checks (the frames are orthonormal by construction)."""
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(centers)
        s_u = np.asarray(s_u, dtype=np.float64).reshape(n)
        s_v = np.asarray(s_v, dtype=np.float64).reshape(n)
        opacities = np.asarray(opacities, dtype=np.float64).reshape(n)
        colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        if np.any(s_u <= 0) or np.any(s_v <= 0):
            raise ValidationError("scales must be positive")
        if np.any(opacities <= 0) or np.any(opacities > 1):
            raise ValidationError("opacity must lie in (0, 1]")
        if colors.size and (colors.min() < 0 or colors.max() > 1):
            raise ValidationError("color must lie in [0, 1]")
        tu, tv, nw = quat_to_frame(quats)

        splats = []
        for i in range(n):
            s = object.__new__(SurfelGaussian)
            s.center, s.t_u, s.t_v = centers[i], tu[i], tv[i]
            s.s_u, s.s_v = float(s_u[i]), float(s_v[i])
            s.opacity, s.color = float(opacities[i]), colors[i]
            splats.append(s)
        scene = cls(splats=splats, bbox=bbox)
        scene._arrays = {
            "center": centers, "t_u": tu, "t_v": tv, "normal": nw,
            "s_u": s_u, "s_v": s_v, "opacity": opacities, "color": colors,
        }
        return scene


@dataclass
class GaussianAttributes13:
    """Raw per-splat attribute vector: offset(3) scales(2) quat(4) opacity(1) color(3)."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        if self.raw.shape != (13,):
            raise ValidationError(f"attribute vector must have length 13, got {self.raw.shape}")


def local_to_world(splat: SurfelGaussian) -> np.ndarray:
    """4x4 map taking local homogeneous (u, v, 1, 1) to the world point
    p + s_u t_u u + s_v t_v v."""
    h = np.zeros((4, 4))
    h[:3, 0] = splat.s_u * splat.t_u
    h[:3, 1] = splat.s_v * splat.t_v
    h[:3, 3] = splat.center
    h[3, 3] = 1.0
    return h


# ---------------------------------------------------------------------------
# quaternion frames (w, x, y, z)

def quat_to_frame(q: np.ndarray):
    """Normalize quaternions (N, 4) and return the rotation's first two
    columns as tangents plus the third as the normal."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 4:
        raise ValidationError(f"expected (N, 4) quaternions, got {q.shape}")
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    if (norm < 1e-8).any():
        raise ValidationError("zero-norm quaternion (norm < 1e-8)")
    w, x, y, z = (q / norm).T
    t_u = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=1)
    t_v = np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=1)
    n_w = np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=1)
    return t_u, t_v, n_w


def frame_to_quat(t_u: np.ndarray, t_v: np.ndarray, n_w: np.ndarray) -> np.ndarray:
    """Rotation matrix columns -> unit quaternion (Shepperd's branch pick)."""
    t_u = np.atleast_2d(t_u)
    t_v = np.atleast_2d(t_v)
    n_w = np.atleast_2d(n_w)
    out = np.zeros((len(t_u), 4))
    for i in range(len(t_u)):
        r = np.stack([t_u[i], t_v[i], n_w[i]], axis=1)
        tr = np.trace(r)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            out[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                      (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            out[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                      0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            out[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def frame_grads_to_quat(q: np.ndarray, g_tu: np.ndarray, g_tv: np.ndarray,
                        g_nw: np.ndarray) -> np.ndarray:
    """Chain frame gradients back to raw (unnormalized) quaternion components.

    Uses the analytic Jacobian of the rotation columns w.r.t. the unit
    quaternion, then the normalization projection (I - qq^T)/|q|.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    if (norm < 1e-8).any():
        raise ValidationError("zero-norm quaternion (norm < 1e-8)")
    qh = q / norm
    w, x, y, z = qh.T
    zero = np.zeros_like(w)

    # d t_u / d (w, x, y, z), each (N, 3)
    dtu = np.stack([
        np.stack([zero, 2 * z, -2 * y], 1),
        np.stack([zero, 2 * y, 2 * z], 1),
        np.stack([-4 * y, 2 * x, -2 * w], 1),
        np.stack([-4 * z, 2 * w, 2 * x], 1),
    ])
    dtv = np.stack([
        np.stack([-2 * z, zero, 2 * x], 1),
        np.stack([2 * y, -4 * x, 2 * w], 1),
        np.stack([2 * x, zero, 2 * z], 1),
        np.stack([-2 * w, -4 * z, 2 * y], 1),
    ])
    dnw = np.stack([
        np.stack([2 * y, -2 * x, zero], 1),
        np.stack([2 * z, -2 * w, -4 * x], 1),
        np.stack([2 * w, 2 * z, -4 * y], 1),
        np.stack([2 * x, 2 * y, zero], 1),
    ])
    # gradient w.r.t. the unit quaternion
    g_unit = np.stack([
        (dtu[k] * g_tu).sum(1) + (dtv[k] * g_tv).sum(1) + (dnw[k] * g_nw).sum(1)
        for k in range(4)
    ], axis=1)
    # through normalization: (I - qh qh^T) / |q|
    proj = g_unit - qh * (g_unit * qh).sum(axis=1, keepdims=True)
    return proj / norm


def decode_attributes(raw, anchor: np.ndarray, scene_scale: float) -> SurfelGaussian:
    """Raw 13-vector -> splat anchored near ``anchor``.

    Offsets are tanh-bounded to 5% of the scene scale; scales sigmoid-bounded
    to 10%; opacity and color are sigmoids of their logits.
    """
    vec = raw.raw if isinstance(raw, GaussianAttributes13) else GaussianAttributes13(raw).raw
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    if scene_scale <= 0:
        raise ValidationError(f"scene_scale must be positive, got {scene_scale}")

    def sig(t):
        return 1.0 / (1.0 + np.exp(-np.clip(t, -60, 60)))

    center = anchor + 0.05 * scene_scale * np.tanh(vec[0:3])
    s_u, s_v = 0.1 * scene_scale * sig(vec[3:5])
    t_u, t_v, _ = quat_to_frame(vec[5:9][None])
    opacity = float(sig(vec[9]))
    color = sig(vec[10:13])
    return SurfelGaussian(center=center, t_u=t_u[0], t_v=t_v[0],
                          s_u=float(s_u), s_v=float(s_v), opacity=opacity, color=color)


def utilization_ratio(scene: SplatScene, tau: float = 0.005) -> float:
    """Fraction of splats whose opacity exceeds tau."""
    if not 0 < tau < 1:
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    if not scene.splats:
        raise ValidationError("utilization_ratio: empty scene")
    alphas = scene.arrays()["opacity"]
    return float((alphas > tau).sum() / len(alphas))
