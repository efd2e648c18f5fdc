"""Flow-matching training loops for the two cascade stages, plus sampling.

Stage 1 diffuses anchor clouds (N, 3); stage 2 diffuses per-anchor features
(N, C_h) with the clean anchors injected into the first layer. Both train on
the velocity-residual objective (see flow.fm_loss for why the schedule weight
collapses) with uniform t in [t_min, 1-t_min] and classifier-free condition
dropping. Single sample per step: set transformers at toy scale are cheap
enough that batching buys nothing over more steps."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericalAbort, ShapeError, ValidationError
from .flow import LatentPointCloud, Schedule, forward_interpolate, ode_sample, velocity_target
from .nets import DenoiserConfig, denoiser_forward, init_denoiser
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, mean, mul, sub


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    lr_floor: float = 0.1    # linear decay from lr to lr_floor*lr over the run
    seed: int = 0
    drop_prob: float = 0.1
    schedule: str = "gvp"
    t_min: float = 1e-3
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValidationError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")
        if not 0.0 < self.t_min < 0.5:
            raise ValidationError(f"t_min must lie in (0, 0.5), got {self.t_min}")
        if not 0.0 < self.lr_floor <= 1.0:
            raise ValidationError(f"lr_floor must lie in (0, 1], got {self.lr_floor}")


def drop_condition(rng: np.random.Generator, drop_prob: float) -> bool:
    """One classifier-free-guidance drop decision."""
    return bool(rng.uniform() < drop_prob)


def _check_dataset(anchors: np.ndarray, labels: np.ndarray,
                   feats: Optional[np.ndarray] = None):
    anchors = np.asarray(anchors, dtype=np.float64)
    labels = np.asarray(labels)
    if anchors.ndim != 3 or anchors.shape[2] != 3:
        raise ShapeError(f"anchors must be (M, N, 3), got {anchors.shape}")
    if labels.shape != (anchors.shape[0],):
        raise ShapeError(
            f"labels must be ({anchors.shape[0]},), got {labels.shape}")
    if feats is not None:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[:2] != anchors.shape[:2]:
            raise ShapeError(
                f"features must be ({anchors.shape[0]}, {anchors.shape[1]}, C), "
                f"got {feats.shape}")
    return anchors, labels.astype(np.int64), feats


def fm_training_loss(params: dict, x0: np.ndarray, t: float, cond,
                     cfg: DenoiserConfig, eps: np.ndarray,
                     schedule: Schedule,
                     anchors: Optional[np.ndarray] = None) -> Tensor:
    """Velocity-residual loss for one sample as a Tensor (taped when the
    params are tape leaves)."""
    z_t = forward_interpolate(x0, eps, t, schedule)
    target = velocity_target(x0, eps, t, schedule)
    v = denoiser_forward(params, z_t, t, cond, cfg, anchors=anchors)
    resid = sub(v, Tensor(target))
    return mean(mul(resid, resid))


def _train_flow(clouds: np.ndarray, labels: np.ndarray, cfg: DenoiserConfig,
                tcfg: TrainConfig, num_classes: int, in_dim: int,
                anchors_all: Optional[np.ndarray],
                anchor_injection: bool, resume=None, checkpoint_cb=None):
    if resume is None:
        params = init_denoiser(cfg, in_dim=in_dim, num_classes=num_classes,
                               seed=tcfg.seed, anchor_injection=anchor_injection)
        state = AdamState.init(params)
        start = 0
    else:
        params, state, start = resume
        if not 0 <= start <= tcfg.steps:
            raise ValidationError(
                f"resume step {start} outside the run of {tcfg.steps} steps")
    schedule = Schedule(tcfg.schedule)
    rows = []
    m = clouds.shape[0]
    for step in range(start, tcfg.steps):
        # the step index keys its own generator, so a resumed run draws the
        # exact samples the uninterrupted run would have
        rng = np.random.default_rng([tcfg.seed, step])
        i = int(rng.integers(0, m))
        x0 = clouds[i]
        eps = rng.standard_normal(x0.shape)
        t = float(rng.uniform(tcfg.t_min, 1.0 - tcfg.t_min))
        dropped = drop_condition(rng, tcfg.drop_prob)
        cond = None if dropped else int(labels[i])
        anchors = anchors_all[i] if anchors_all is not None else None

        with Tape() as tape:
            tparams = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = fm_training_loss(tparams, x0, t, cond, cfg, eps, schedule,
                                    anchors=anchors)
            val = float(loss.data)
            if not np.isfinite(val):
                raise NumericalAbort(f"training loss non-finite at step {step}")
            node_grads = tape.backward(loss)

        grads = {}
        for k, tp in tparams.items():
            if tp.node_id is not None and tp.node_id in node_grads:
                grads[k] = node_grads[tp.node_id]
        frac = step / max(1, tcfg.steps - 1)
        lr = tcfg.lr * (1.0 - (1.0 - tcfg.lr_floor) * frac)
        params, state = adam_step(params, grads, state, lr=lr)
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            rows.append({"step": step, "loss": val, "dropped": dropped})
        if checkpoint_cb is not None:
            # step + 1 is the next step to run, i.e. the resume point
            checkpoint_cb(step + 1, params, state)
    return params, rows, state


OPT_PREFIX = "_opt."


def pack_training_state(params: dict, state: AdamState) -> dict:
    """Flatten params plus Adam moments into one tensor dict for a
    checkpoint. Moment keys get the non-colliding ``_opt.`` prefix."""
    flat = dict(params)
    for k, arr in state.m.items():
        flat[OPT_PREFIX + "m." + k] = arr
    for k, arr in state.v.items():
        flat[OPT_PREFIX + "v." + k] = arr
    return flat


def unpack_training_state(flat: dict, adam_step_count: int):
    """Inverse of pack_training_state; returns (params, AdamState)."""
    params = {k: v for k, v in flat.items() if not k.startswith(OPT_PREFIX)}
    m = {k[len(OPT_PREFIX) + 2:]: v for k, v in flat.items()
         if k.startswith(OPT_PREFIX + "m.")}
    v = {k[len(OPT_PREFIX) + 2:]: v for k, v in flat.items()
         if k.startswith(OPT_PREFIX + "v.")}
    if sorted(m) != sorted(params) or sorted(v) != sorted(params):
        raise ValidationError("checkpoint optimizer moments do not match its parameters")
    return params, AdamState(m=m, v=v, step=int(adam_step_count))


def train_stage1(anchors: np.ndarray, labels: np.ndarray, cfg: DenoiserConfig,
                 tcfg: TrainConfig, num_classes: Optional[int] = None,
                 resume=None, checkpoint_cb=None):
    """Anchor-cloud flow model: diffuses (N, 3) point sets conditioned on a
    class label. Returns (params, loss rows, optimizer state); pass
    ``resume=(params, state, next_step)`` to continue an interrupted run.
    ``checkpoint_cb(next_step, params, state)`` fires after every update."""
    anchors, labels, _ = _check_dataset(anchors, labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return _train_flow(anchors, labels, cfg, tcfg, num_classes, in_dim=3,
                       anchors_all=None, anchor_injection=False,
                       resume=resume, checkpoint_cb=checkpoint_cb)


def train_stage2(anchors: np.ndarray, feats: np.ndarray, labels: np.ndarray,
                 cfg: DenoiserConfig, tcfg: TrainConfig,
                 num_classes: Optional[int] = None,
                 anchor_injection: bool = True, resume=None,
                 checkpoint_cb=None):
    """Feature flow model: diffuses (N, C_h) features per cloud. Clean
    anchors are injected into the first layer (toggleable for the ablation);
    condition dropping removes only the class label, never the anchors."""
    anchors, labels, feats = _check_dataset(anchors, labels, feats)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return _train_flow(feats, labels, cfg, tcfg, num_classes,
                       in_dim=feats.shape[2], anchors_all=anchors,
                       anchor_injection=anchor_injection, resume=resume,
                       checkpoint_cb=checkpoint_cb)


def validation_fm_loss(params: dict, clouds: np.ndarray, labels: np.ndarray,
                       cfg: DenoiserConfig,
                       anchors_all: Optional[np.ndarray] = None,
                       schedule_kind: str = "gvp", seed: int = 0,
                       t_grid=(0.2, 0.5, 0.8)) -> float:
    """Deterministic comparator: mean fm loss over a fixed (sample, t) grid
    with seeded noise. Used by the anchor-injection ablation."""
    schedule = Schedule(schedule_kind)
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for i in range(clouds.shape[0]):
        eps = rng.standard_normal(clouds[i].shape)
        anchors = anchors_all[i] if anchors_all is not None else None
        for t in t_grid:
            loss = fm_training_loss(params, clouds[i], float(t), int(labels[i]),
                                    cfg, eps, schedule, anchors=anchors)
            total += float(loss.data)
            count += 1
    return total / count


def cascade_sample(params1: dict, cfg1: DenoiserConfig,
                   params2: dict, cfg2: DenoiserConfig,
                   cond, n_points: int, feature_dim: int,
                   seeds=(0, 1), steps: int = 64, scale: float = 4.0,
                   z_x_override: Optional[np.ndarray] = None) -> LatentPointCloud:
    """Two-stage sampling: the anchor model lays out geometry, the feature
    model paints it conditioned on those anchors. ``z_x_override`` swaps in
    an edited anchor cloud and reruns only stage 2 (same seed, same class),
    which is the editing workflow."""

    def model1(z, t, c):
        return np.asarray(denoiser_forward(params1, z, t, c, cfg1).data)

    if z_x_override is not None:
        z_x = np.asarray(z_x_override, dtype=np.float64)
        if z_x.shape != (n_points, 3):
            raise ShapeError(
                f"edited anchors must be ({n_points}, 3), got {z_x.shape}")
    else:
        z_x = ode_sample(model1, cond=cond, steps=steps, scale=scale,
                         seed=seeds[0], shape=(n_points, 3))

    def model2(z, t, c):
        return np.asarray(
            denoiser_forward(params2, z, t, c, cfg2, anchors=z_x).data)

    z_h = ode_sample(model2, cond=cond, steps=steps, scale=scale,
                     seed=seeds[1], shape=(n_points, feature_dim))
    lo = np.minimum(z_x.min(axis=0), -1.0)
    hi = np.maximum(z_x.max(axis=0), 1.0)
    return LatentPointCloud(anchors=z_x, features=z_h, bbox=(lo, hi))
