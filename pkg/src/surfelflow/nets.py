"""Permutation-symmetric transformer pieces on the tape engine.

Everything here is functional: a model is a flat ``dict[str, np.ndarray]``
of parameters plus a config, and each forward op takes that dict explicitly.
Training code wraps the arrays in ``Tensor(..., requires_grad=True)`` under
an active tape; inference passes the raw arrays. No positional encodings
anywhere, so every op is equivariant (or invariant) under token permutation.

Parameter key layout, by owner:

  denoiser   in.w in.b out.w out.b t.{w1,b1,w2,b2} label.emb [inj.w]
             blk{i}.attn.{wq,bq,wk,bk,wv,bv,wo,bo,logtemp}
             blk{i}.mlp.{w1,b1,w2,b2}  blk{i}.mod
             blk{i}.cross.{wq,bq,wk,bk,wv,bv,wo,bo,logtemp}
  encoder    enc.patch.{w,b}  enc.blk{i}.{attn,mlp}.*
  read       read.{wq,bq,wk,bk,wv,bv,wo,bo,logtemp}
  upsampler  up{k}.zu  up{k}.b{0,1}.{attn,mlp}.*
  head       head.{w,b}

Time conditioning is AdaLN-single: one MLP maps a fixed sinusoidal feature
of t to 6C modulation parameters (shift/scale/gate for both sub-blocks),
shared across layers; each layer adds a learned 6C offset. The MLP head and
the offsets start at zero, so every block is the identity map at init and
gradients reach the gates first.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .geometry import fourier_pe
from .surfels import GaussianAttributes13
from . import tensor as T
from .tensor import Tensor

TIME_BANDS = 8          # sinusoidal feature bands for the time embedding
ANCHOR_PE_BANDS = 6     # fourier bands for stage-2 anchor injection
INIT_STD = 0.02


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _params(params: dict) -> dict:
    return {k: _t(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# configs and token container

@dataclass
class TokenSet:
    """An unordered set of M feature tokens of width C."""

    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be (M, C), got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValidationError("tokens contain non-finite entries")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass
class DenoiserConfig:
    layers: int
    heads: int
    width: int
    qk_norm: bool = True
    cond_width: Optional[int] = None

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.width < 1:
            raise ValidationError("layers, heads, and width must be positive")
        if self.width % self.heads != 0:
            raise ValidationError(
                f"width {self.width} not divisible by heads {self.heads}")
        if self.cond_width is None:
            self.cond_width = self.width


@dataclass
class GaussianHeadConfig:
    K: int
    f_u: tuple
    out_dim: int = 13

    def __post_init__(self):
        self.f_u = tuple(int(f) for f in self.f_u)
        if len(self.f_u) != self.K:
            raise ValidationError(
                f"need {self.K} upsampling ratios, got {len(self.f_u)}")
        if any(f < 1 for f in self.f_u):
            raise ValidationError(f"upsampling ratios must be >= 1, got {self.f_u}")
        if self.out_dim != 13:
            raise ValidationError(
                f"attribute head emits the fixed 13-dim layout, got out_dim={self.out_dim}")


# ---------------------------------------------------------------------------
# initializers

def _linear(rng, fan_in: int, fan_out: int, std: float = INIT_STD) -> np.ndarray:
    return std * rng.standard_normal((fan_in, fan_out))


def _init_attn(params: dict, rng, prefix: str, q_dim: int, kv_dim: int,
               width: int, out_dim: int, qk_norm: bool, zero_out: bool = False):
    params[prefix + "wq"] = _linear(rng, q_dim, width)
    params[prefix + "bq"] = np.zeros(width)
    params[prefix + "wk"] = _linear(rng, kv_dim, width)
    params[prefix + "bk"] = np.zeros(width)
    params[prefix + "wv"] = _linear(rng, kv_dim, width)
    params[prefix + "bv"] = np.zeros(width)
    w_o = np.zeros((width, out_dim)) if zero_out else _linear(rng, width, out_dim)
    params[prefix + "wo"] = w_o
    params[prefix + "bo"] = np.zeros(out_dim)
    if qk_norm:
        params[prefix + "logtemp"] = np.array(0.0)


def _init_block(params: dict, rng, cfg: DenoiserConfig, prefix: str,
                with_mod: bool):
    c = cfg.width
    _init_attn(params, rng, prefix + "attn.", c, c, c, c, cfg.qk_norm)
    params[prefix + "mlp.w1"] = _linear(rng, c, 4 * c)
    params[prefix + "mlp.b1"] = np.zeros(4 * c)
    params[prefix + "mlp.w2"] = _linear(rng, 4 * c, c)
    params[prefix + "mlp.b2"] = np.zeros(c)
    if with_mod:
        params[prefix + "mod"] = np.zeros(6 * c)


def init_denoiser(cfg: DenoiserConfig, in_dim: int, num_classes: int,
                  seed: int = 0, anchor_injection: bool = False) -> dict:
    """Parameters for a set denoiser: in/out projections, time head, a label
    table with one extra null row for condition dropping, per-layer trunk
    blocks and condition cross-attention, optionally the anchor injection."""
    if in_dim < 1 or num_classes < 1:
        raise ValidationError("in_dim and num_classes must be positive")
    rng = np.random.default_rng(seed)
    c = cfg.width
    p: dict = {}
    p["in.w"] = _linear(rng, in_dim, c)
    p["in.b"] = np.zeros(c)
    p["t.w1"] = _linear(rng, 2 * TIME_BANDS, c)
    p["t.b1"] = np.zeros(c)
    p["t.w2"] = np.zeros((c, 6 * c))
    p["t.b2"] = np.zeros(6 * c)
    p["label.emb"] = INIT_STD * rng.standard_normal((num_classes + 1, cfg.cond_width))
    for i in range(cfg.layers):
        _init_block(p, rng, cfg, f"blk{i}.", with_mod=True)
        # residual condition injection starts silent
        _init_attn(p, rng, f"blk{i}.cross.", c, cfg.cond_width, c, c,
                   cfg.qk_norm, zero_out=True)
    p["out.w"] = _linear(rng, c, in_dim)
    p["out.b"] = np.zeros(in_dim)
    if anchor_injection:
        p["inj.w"] = np.zeros((3 + 6 * ANCHOR_PE_BANDS, c))
    return p


def init_encoder(cfg: DenoiserConfig, patch: int, in_channels: int,
                 seed: int = 0) -> dict:
    if patch < 1 or in_channels < 1:
        raise ValidationError("patch and in_channels must be positive")
    rng = np.random.default_rng(seed)
    p: dict = {}
    p["enc.patch.w"] = _linear(rng, patch * patch * in_channels, cfg.width)
    p["enc.patch.b"] = np.zeros(cfg.width)
    for i in range(cfg.layers):
        _init_block(p, rng, cfg, f"enc.blk{i}.", with_mod=False)
    return p


def init_cross_read(cfg: DenoiserConfig, query_dim: int, context_dim: int,
                    out_dim: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p: dict = {}
    _init_attn(p, rng, "read.", query_dim, context_dim, cfg.width, out_dim,
               cfg.qk_norm)
    return p


def init_upsampler(cfg: DenoiserConfig, head_cfg: GaussianHeadConfig,
                   seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p: dict = {}
    for k, f in enumerate(head_cfg.f_u):
        p[f"up{k}.zu"] = INIT_STD * rng.standard_normal((f, cfg.width))
        _init_block(p, rng, cfg, f"up{k}.b0.", with_mod=False)
        _init_block(p, rng, cfg, f"up{k}.b1.", with_mod=False)
    return p


def init_gaussian_head(width: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {"head.w": _linear(rng, width, 13), "head.b": np.zeros(13)}


# ---------------------------------------------------------------------------
# attention core

def _split_heads(x: Tensor, heads: int) -> Tensor:
    shape = x.data.shape
    d = shape[-1] // heads
    x = T.reshape(x, tuple(shape[:-1]) + (heads, d))
    n = x.data.ndim
    # (..., M, h, d) -> (..., h, M, d)
    return T.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))


def _merge_heads(x: Tensor) -> Tensor:
    n = x.data.ndim
    x = T.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
    shape = x.data.shape
    return T.reshape(x, tuple(shape[:-2]) + (shape[-2] * shape[-1],))


def _qk_logits(p: dict, prefix: str, xq: Tensor, xk: Tensor,
               cfg: DenoiserConfig) -> Tensor:
    q = T.add(T.matmul(xq, p[prefix + "wq"]), p[prefix + "bq"])
    k = T.add(T.matmul(xk, p[prefix + "wk"]), p[prefix + "bk"])
    q = _split_heads(q, cfg.heads)
    k = _split_heads(k, cfg.heads)
    if cfg.qk_norm:
        q = T.l2_normalize(q)
        k = T.l2_normalize(k)
    n = k.data.ndim
    kt = T.transpose(k, tuple(range(n - 2)) + (n - 1, n - 2))
    logits = T.matmul(q, kt)
    if cfg.qk_norm:
        scale = T.exp(p[prefix + "logtemp"])
    else:
        scale = Tensor(1.0 / np.sqrt(cfg.width // cfg.heads))
    return T.mul(logits, scale)


def _mha(p: dict, prefix: str, xq: Tensor, xk: Tensor,
         cfg: DenoiserConfig) -> Tensor:
    logits = _qk_logits(p, prefix, xq, xk, cfg)
    v = T.add(T.matmul(xk, p[prefix + "wv"]), p[prefix + "bv"])
    v = _split_heads(v, cfg.heads)
    out = _merge_heads(T.matmul(T.softmax(logits), v))
    return T.add(T.matmul(out, p[prefix + "wo"]), p[prefix + "bo"])


def attention_logits(params: dict, prefix: str, x, cfg: DenoiserConfig) -> np.ndarray:
    """Pre-softmax self-attention logits (heads, M, M); diagnostic surface for
    the QK-norm temperature bound."""
    p = _params(params)
    xt = _t(x)
    return np.asarray(_qk_logits(p, prefix, xt, xt, cfg).data)


def _mod_row(mod: Tensor, k: int, width: int) -> Tensor:
    return T.reshape(T.narrow(mod, 0, k, 1), (width,))


def _modulate(h: Tensor, mod: Optional[Tensor], shift_row: int, width: int) -> Tensor:
    if mod is None:
        return h
    shift = _mod_row(mod, shift_row, width)
    scale = _mod_row(mod, shift_row + 1, width)
    return T.add(T.mul(h, T.add(scale, Tensor(1.0))), shift)


def _gate(branch: Tensor, mod: Optional[Tensor], row: int, width: int) -> Tensor:
    if mod is None:
        return branch
    return T.mul(branch, _mod_row(mod, row, width))


def _block(p: dict, prefix: str, x: Tensor, mod: Optional[Tensor],
           cfg: DenoiserConfig) -> Tensor:
    c = cfg.width
    h = _modulate(T.layer_norm(x), mod, 0, c)
    x = T.add(x, _gate(_mha(p, prefix + "attn.", h, h, cfg), mod, 2, c))
    h = _modulate(T.layer_norm(x), mod, 3, c)
    m = T.add(T.matmul(T.tanh(T.add(T.matmul(h, p[prefix + "mlp.w1"]),
                                    p[prefix + "mlp.b1"])),
                       p[prefix + "mlp.w2"]), p[prefix + "mlp.b2"])
    return T.add(x, _gate(m, mod, 5, c))


def self_attention_block(params: dict, prefix: str, x, mod, cfg: DenoiserConfig) -> Tensor:
    """One pre-norm block: x + gate1*Attn(modulate(LN x)) then the gated MLP.

    ``mod`` is a (6, C) modulation tensor (shift/scale/gate twice) or None
    for plain pre-norm with unit gates.
    """
    xt = _t(x)
    if xt.data.ndim < 2 or xt.data.shape[-1] != cfg.width:
        raise ShapeError(f"block expects width {cfg.width}, got {xt.data.shape}")
    return _block(_params(params), prefix, xt, mod, cfg)


# ---------------------------------------------------------------------------
# time modulation (AdaLN-single)

def _time_features(t: float) -> np.ndarray:
    t = float(t)
    if not np.isfinite(t):
        raise ValidationError(f"time must be finite, got {t}")
    s = 2.0 * t - 1.0
    freqs = np.pi * 2.0 ** np.arange(TIME_BANDS)
    return np.concatenate([np.sin(freqs * s), np.cos(freqs * s)])[None, :]


def _time_head(p: dict, t: float) -> Tensor:
    h = T.tanh(T.add(T.matmul(Tensor(_time_features(t)), p["t.w1"]), p["t.b1"]))
    return T.add(T.matmul(h, p["t.w2"]), p["t.b2"])


def time_modulation(params: dict, t: float, cfg: DenoiserConfig, layer: int) -> Tensor:
    """Shared time head plus the layer's learned offset, as a (6, C) tensor."""
    p = _params(params)
    mod = T.add(_time_head(p, t), p[f"blk{layer}.mod"])
    return T.reshape(mod, (6, cfg.width))


# ---------------------------------------------------------------------------
# read cross-attention

def cross_attention_read(params: dict, queries, context, cfg: DenoiserConfig,
                         prefix: str = "read.") -> Tensor:
    """Queries attend over context (keys = values = context); no residual.

    This is a projection, not a trunk block: the output lives in whatever
    width the value/output projections define.
    """
    q = _t(queries)
    ctx = _t(context)
    if q.data.ndim != 2 or ctx.data.ndim != 2:
        raise ShapeError("queries and context must be 2D token matrices")
    if ctx.data.shape[0] == 0:
        raise ValidationError("cross_attention_read: empty context")
    return _mha(_params(params), prefix, q, ctx, cfg)


# ---------------------------------------------------------------------------
# multi-view encoder + VAE head

def _patchify(view: np.ndarray, patch: int) -> np.ndarray:
    h, w, ch = view.shape
    rows = view.reshape(h // patch, patch, w // patch, patch, ch)
    rows = rows.transpose(0, 2, 1, 3, 4)
    return rows.reshape(-1, patch * patch * ch)


def encode_views(params: dict, views: Sequence[np.ndarray],
                 cfg: DenoiserConfig, patch: int) -> Tensor:
    """Patchify every view, pool all patch tokens into one set, and run the
    encoder blocks jointly so attention crosses view boundaries."""
    if len(views) == 0:
        raise ValidationError("encode_views: need at least one view")
    p = _params(params)
    in_dim = p["enc.patch.w"].data.shape[0]
    rows = []
    for i, v in enumerate(views):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError(f"view {i} must be (H, W, ch), got {v.shape}")
        h, w, ch = v.shape
        if h % patch or w % patch:
            raise ValidationError(
                f"view {i} is {h}x{w}, not divisible by patch {patch}")
        if patch * patch * ch != in_dim:
            raise ShapeError(
                f"view {i} has {ch} channels; patch projection expects "
                f"{in_dim // (patch * patch)}")
        rows.append(_patchify(v, patch))
    x = T.add(T.matmul(Tensor(np.concatenate(rows, axis=0)), p["enc.patch.w"]),
              p["enc.patch.b"])
    for i in range(cfg.layers):
        x = _block(p, f"enc.blk{i}.", x, None, cfg)
    return x


def vae_latent(z_raw, seed: int = 0):
    """Split raw tokens into (mu, logvar) halves and reparameterize.

    Returns (sample, mu, logvar, kl) with kl = 0.5*mean(mu^2 + var - 1 - logvar).
    """
    x = _t(z_raw)
    if x.data.ndim != 2 or x.data.shape[1] % 2:
        raise ShapeError(f"raw latent must be (M, 2*C_h), got {x.data.shape}")
    m, width = x.data.shape
    c = width // 2
    mu = T.narrow(x, 1, 0, c)
    logvar = T.narrow(x, 1, c, c)
    eta = np.random.default_rng(seed).standard_normal((m, c))
    sample = T.add(mu, T.mul(T.exp(T.mul(logvar, Tensor(0.5))), Tensor(eta)))
    inside = T.sub(T.add(T.mul(mu, mu), T.exp(logvar)),
                   T.add(Tensor(1.0), logvar))
    kl = T.mul(T.mean(inside), Tensor(0.5))
    return sample, mu, logvar, kl


# ---------------------------------------------------------------------------
# token upsampler + attribute head

def upsample_tokens(params: dict, z, level: int, head_cfg: GaussianHeadConfig,
                    cfg: DenoiserConfig) -> Tensor:
    """One cascade level: each token forms a private (f_u+1)-token group with
    the level's learned slots, two blocks run per group, and the transformed
    slots become the children. Attention never crosses groups."""
    if not 0 <= level < head_cfg.K:
        raise ValidationError(
            f"upsample level {level} out of range for K={head_cfg.K}")
    z = _t(z)
    if z.data.ndim != 2 or z.data.shape[1] != cfg.width:
        raise ShapeError(f"tokens must be (M, {cfg.width}), got {z.data.shape}")
    p = _params(params)
    m = z.data.shape[0]
    f = head_cfg.f_u[level]
    slots = T.add(Tensor(np.zeros((m, f, cfg.width))), p[f"up{level}.zu"])
    g = T.concat([slots, T.reshape(z, (m, 1, cfg.width))], axis=1)
    g = _block(p, f"up{level}.b0.", g, None, cfg)
    g = _block(p, f"up{level}.b1.", g, None, cfg)
    return T.reshape(T.narrow(g, 1, 0, f), (m * f, cfg.width))


def gaussian_head(params: dict, tokens, anchors: np.ndarray):
    """Linear C->13 projection per token; anchors pass through aligned so
    every child keeps its ancestor's anchor for decode_attributes."""
    x = _t(tokens)
    if x.data.ndim != 2:
        raise ShapeError(f"tokens must be 2D, got {x.data.shape}")
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.shape != (x.data.shape[0], 3):
        raise ValidationError(
            f"anchor count {anchors.shape} does not match {x.data.shape[0]} tokens")
    p = _params(params)
    raw = np.asarray(T.add(T.matmul(x, p["head.w"]), p["head.b"]).data)
    attrs = [GaussianAttributes13(raw[i].copy()) for i in range(raw.shape[0])]
    return attrs, anchors.copy()


def inherit_anchors(anchors: np.ndarray, factor: int) -> np.ndarray:
    """Each of a token's ``factor`` children inherits its anchor position."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    if factor < 1:
        raise ValidationError(f"factor must be >= 1, got {factor}")
    return np.repeat(anchors, factor, axis=0)


# ---------------------------------------------------------------------------
# denoiser

def denoiser_forward(params: dict, z_t, t: float, cond, cfg: DenoiserConfig,
                     anchors: Optional[np.ndarray] = None) -> Tensor:
    """Velocity prediction for a token set at time t.

    ``cond`` is a class index or None; None selects the learned null row of
    the label table (the classifier-free branch). ``anchors`` (stage 2 only)
    inject fourier features of the conditioning positions into the first
    layer's input; the hook is active only when the parameter set was built
    with anchor_injection.
    """
    z = _t(z_t)
    p = _params(params)
    in_dim = p["in.w"].data.shape[0]
    if z.data.ndim != 2 or z.data.shape[1] != in_dim:
        raise ShapeError(
            f"denoiser expects (M, {in_dim}) tokens, got {z.data.shape}")
    num_classes = p["label.emb"].data.shape[0] - 1
    if cond is None:
        idx = num_classes
    else:
        idx = int(cond)
        if not 0 <= idx < num_classes:
            raise ValidationError(
                f"class index {idx} out of range [0, {num_classes})")
    x = T.add(T.matmul(z, p["in.w"]), p["in.b"])
    if anchors is not None and "inj.w" in params:
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.shape != (z.data.shape[0], 3):
            raise ValidationError(
                f"anchors {anchors.shape} do not match {z.data.shape[0]} tokens")
        pe = fourier_pe(np.clip(anchors, -1.0, 1.0), ANCHOR_PE_BANDS)
        x = T.add(x, T.matmul(Tensor(pe), p["inj.w"]))
    ctx = T.narrow(p["label.emb"], 0, idx, 1)
    t_base = _time_head(p, t)
    for i in range(cfg.layers):
        mod = T.reshape(T.add(t_base, p[f"blk{i}.mod"]), (6, cfg.width))
        x = _block(p, f"blk{i}.", x, mod, cfg)
        x = T.add(x, _mha(p, f"blk{i}.cross.", T.layer_norm(x), ctx, cfg))
    return T.add(T.matmul(x, p["out.w"]), p["out.b"])


# ---------------------------------------------------------------------------
# flat parameter packing (gradient checks, checkpoints)

def pack_params(params: dict):
    """Concatenate parameters into one vector plus a (key, shape, offset)
    template; ordering is sorted by key, so it is stable across runs."""
    template = []
    chunks = []
    offset = 0
    for key in sorted(params):
        arr = np.asarray(params[key], dtype=np.float64)
        template.append((key, arr.shape, offset))
        chunks.append(arr.reshape(-1))
        offset += arr.size
    vec = np.concatenate(chunks) if chunks else np.zeros(0)
    return vec, template


def unpack_params(x: Tensor, template) -> dict:
    """Differentiable inverse of pack_params: narrow+reshape views of x."""
    x = _t(x)
    out = {}
    for key, shape, offset in template:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out[key] = T.reshape(T.narrow(x, 0, offset, size), shape)
    return out
