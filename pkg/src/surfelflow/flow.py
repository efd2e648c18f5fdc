"""Flow-matching core: interpolation schedules, the log-SNR reparameterization
between noise- and velocity-prediction, the weighted training objective,
classifier-free guidance, and the deterministic Euler sampler.

Time convention: data lives at t=0, noise at t=1, so a(0)=1, b(0)=0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NumericalAbort, ShapeError, ValidationError

SCHEDULE_KINDS = ("gvp", "linear")

# model evaluation times are clamped away from the endpoints where the
# log-SNR slope diverges
T_MIN = 1e-3


@dataclass(frozen=True)
class Schedule:
    """Forward interpolation z_t = a(t) x0 + b(t) eps.

    gvp: a=cos(pi t/2), b=sin(pi t/2) (variance preserving, a^2+b^2=1)
    linear: a=1-t, b=t (straight path)
    """

    kind: str

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(
                f"unknown schedule kind {self.kind!r}, expected one of {SCHEDULE_KINDS}")

    def coeffs(self, t: float):
        """(a, b, a', b') at time t."""
        if self.kind == "gvp":
            h = math.pi / 2.0
            return (math.cos(h * t), math.sin(h * t),
                    -h * math.sin(h * t), h * math.cos(h * t))
        return 1.0 - t, t, -1.0, 1.0


@dataclass(frozen=True)
class SnrTerms:
    """Log signal-to-noise ratio, its slope, and the flow-matching weight
    w_fm = -1/2 lambda' b^2 at one (schedule, t)."""

    lam: float
    lam_prime: float
    w_fm: float


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return t


def schedule_eval(s: Schedule, t: float):
    """(a, b, a', b', lambda, lambda') at time t.

    lambda = log(a^2/b^2) and lambda' = 2(a'/a - b'/b).  At the endpoints the
    log-SNR terms are signed-infinity sentinels (never NaN): lambda is +inf at
    t=0 and -inf at t=1, lambda' is -inf at both.
    """
    t = _check_t(t)
    a, b, ap, bp = s.coeffs(t)
    if t == 0.0:
        return 1.0, 0.0, ap, bp, math.inf, -math.inf
    if t == 1.0:
        return a, 1.0, ap, bp, -math.inf, -math.inf
    lam = 2.0 * (math.log(a) - math.log(b))
    lam_p = 2.0 * (ap / a - bp / b)
    return a, b, ap, bp, lam, lam_p


def snr_terms(s: Schedule, t: float) -> SnrTerms:
    t = _check_t(t)
    # w_fm = -1/2 lambda' b^2 has finite limits even where lambda' diverges:
    # 0 at t=0, +inf at t=1 (for linear it equals t/(1-t))
    if t == 0.0:
        return SnrTerms(lam=math.inf, lam_prime=-math.inf, w_fm=0.0)
    if t == 1.0:
        return SnrTerms(lam=-math.inf, lam_prime=-math.inf, w_fm=math.inf)
    _, b, _, _, lam, lam_p = schedule_eval(s, t)
    return SnrTerms(lam=lam, lam_prime=lam_p, w_fm=-0.5 * lam_p * b * b)


def _check_pair(x0: np.ndarray, eps: np.ndarray):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    return x0, eps


def forward_interpolate(x0: np.ndarray, eps: np.ndarray, t: float,
                        s: Schedule) -> np.ndarray:
    """z_t = a(t) x0 + b(t) eps; exact at the endpoints."""
    x0, eps = _check_pair(x0, eps)
    t = _check_t(t)
    if t == 0.0:
        return x0.copy()
    if t == 1.0:
        return eps.copy()
    a, b, _, _ = s.coeffs(t)
    return a * x0 + b * eps


def velocity_target(x0: np.ndarray, eps: np.ndarray, t: float,
                    s: Schedule) -> np.ndarray:
    """d z_t / dt = a'(t) x0 + b'(t) eps."""
    x0, eps = _check_pair(x0, eps)
    t = _check_t(t)
    _, _, ap, bp = s.coeffs(t)
    return ap * x0 + bp * eps


def eps_from_v(v: np.ndarray, z: np.ndarray, t: float, s: Schedule) -> np.ndarray:
    """Recover the noise prediction from a velocity prediction:
    eps = (-2 / (lambda' b)) (v - (a'/a) z).  Interior t only."""
    v, z = _check_pair(v, z)
    t = _check_t(t)
    if t == 0.0 or t == 1.0:
        raise DomainError(f"eps_from_v requires t in (0, 1), got {t}")
    a, b, ap, bp, lam, lam_p = schedule_eval(s, t)
    return (-2.0 / (lam_p * b)) * (v - (ap / a) * z)


def fm_loss(model_v: np.ndarray, x0: np.ndarray, eps: np.ndarray, t: float,
            s: Schedule) -> float:
    """Weighted noise-prediction objective
    -1/2 w_fm(t) lambda'(t) mean||eps_hat - eps||^2.

    Substituting w_fm = -1/2 lambda' b^2 and eps_hat - eps =
    (-2/(lambda' b)) (model_v - v_target) collapses the weight entirely:
    the objective equals the plain velocity-residual MSE, which is the form
    computed here (finite at both endpoints, unlike either factor alone).
    """
    model_v = np.asarray(model_v, dtype=np.float64)
    x0, eps = _check_pair(x0, eps)
    if model_v.shape != x0.shape:
        raise ShapeError(f"model_v shape {model_v.shape} != x0 shape {x0.shape}")
    if not np.all(np.isfinite(model_v)):
        raise NumericalAbort("model produced non-finite velocity")
    resid = model_v - velocity_target(x0, eps, t, s)
    return float(np.mean(resid * resid))


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray,
                scale: float = 4.0) -> np.ndarray:
    """Classifier-free guidance: v_uncond + scale (v_cond - v_uncond)."""
    v_cond, v_uncond = _check_pair(v_cond, v_uncond)
    if scale == 1.0:
        return v_cond.copy()
    if scale == 0.0:
        return v_uncond.copy()
    return v_uncond + scale * (v_cond - v_uncond)


def ode_sample(model: Callable, cond=None, steps: int = 250, scale: float = 4.0,
               seed: int = 0, shape: tuple = (), t_min: float = T_MIN) -> np.ndarray:
    """Explicit Euler integration of dz/dt = v from t=1 (seeded standard
    normal) down to t=0 on a uniform grid.

    model(z, t, cond) -> velocity; evaluation times are clamped to
    [t_min, 1-t_min].  With cond given, the model is queried both with the
    condition and with None and guided by cfg_combine; deterministic under a
    fixed (seed, steps, scale, cond).
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    z = np.random.default_rng(seed).standard_normal(shape)
    dt = 1.0 / steps
    for k in range(steps):
        t = min(max(1.0 - k * dt, t_min), 1.0 - t_min)
        if cond is None:
            v = np.asarray(model(z, t, None), dtype=np.float64)
        else:
            v = cfg_combine(np.asarray(model(z, t, cond), dtype=np.float64),
                            np.asarray(model(z, t, None), dtype=np.float64),
                            scale)
        if not np.all(np.isfinite(v)):
            raise NumericalAbort(f"non-finite velocity at sampler step {k} (t={t:.4f})")
        z = z - dt * v
    return z


@dataclass
class LatentPointCloud:
    """Point-cloud structured latent: anchor positions in the normalized
    [-1,1]^3 frame plus per-anchor feature rows, with the original bounding
    box kept for denormalization."""

    anchors: np.ndarray
    features: np.ndarray
    bbox: tuple

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.anchors.ndim != 2 or self.anchors.shape[1] != 3:
            raise ShapeError(f"anchors must be (N, 3), got {self.anchors.shape}")
        if self.features.ndim != 2 or len(self.features) != len(self.anchors):
            raise ShapeError(
                f"features must be (N, C_h) with N={len(self.anchors)}, "
                f"got {self.features.shape}")
        if not (np.all(np.isfinite(self.anchors)) and np.all(np.isfinite(self.features))):
            raise ValidationError("latent entries must be finite")
        lo = np.asarray(self.bbox[0], dtype=np.float64).reshape(3)
        hi = np.asarray(self.bbox[1], dtype=np.float64).reshape(3)
        self.bbox = (lo, hi)

    @property
    def n_points(self) -> int:
        return len(self.anchors)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def combined(self) -> np.ndarray:
        """Rows [z_x | z_h] of width 3 + C_h."""
        return np.concatenate([self.anchors, self.features], axis=1)
