"""Window machinery, sparse sampling attention, local reconstruction, and IRM blocks.

Feature maps are batched ``[N, C, H, W]``.  Window tensors are
``[N * M2, C, w, w]`` with the image index as the slow axis and windows in
row-major order within an image.  Uncertainty reaches the attention layers as
a plain array of Laplace scales ``sigma`` with shape ``[N, 1, H, W]``; the
rankings built from it are constants, so no gradient flows back through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import uncertainty as U
from .errors import ConfigError, ShapeError
from .nn import ChannelNorm, Conv2d, FeedForward, LayerNorm, Linear, Module, param, trunc_normal
from .tensor import Tensor

SSA_MODES = ("ranked", "none", "direct")
LR_MODES = ("ranked", "none", "direct")
MIXERS = ("ssa", "wsa", "csa", "sa")


@dataclass(frozen=True)
class AttentionBlockConfig:
    """Window and ranking parameters for one IRM stage.

    ``ssa_mode`` / ``lr_mode`` select how uncertainty drives each branch:
    ``ranked`` (constraint matrix / Top-k mask), ``none`` (uncertainty
    ignored) or ``direct`` (raw normalized uncertainty, no ranking).
    ``mixer`` swaps the token mixer used in SSA slots.
    """

    window_side: int = 8
    heads: int = 1
    beta: float = 0.6
    gamma: float = 0.8
    alpha: float = 0.2
    k_fraction: float = 0.8
    ssa_mode: str = "ranked"
    lr_mode: str = "ranked"
    mixer: str = "ssa"

    def __post_init__(self):
        if self.window_side < 1 or self.heads < 1:
            raise ConfigError("window_side and heads must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if not 0.0 < self.k_fraction <= 1.0:
            raise ConfigError(f"k_fraction must lie in (0, 1], got {self.k_fraction}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.ssa_mode not in SSA_MODES or self.lr_mode not in LR_MODES:
            raise ConfigError(f"unknown uncertainty mode {self.ssa_mode!r}/{self.lr_mode!r}")
        if self.mixer not in MIXERS:
            raise ConfigError(f"unknown mixer {self.mixer!r}")

    def with_heads(self, heads: int) -> "AttentionBlockConfig":
        return replace(self, heads=heads)


# ----------------------------------------------------------------------
# windows
# ----------------------------------------------------------------------

def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), False
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, True


def window_partition(x, w: int) -> Tensor:
    """Tile [C,H,W] (or [N,C,H,W]) into non-overlapping w x w windows, row-major."""
    x, _ = _as_batched(T.as_tensor(x))
    n, c, h, wd = x.shape
    if h % w or wd % w:
        raise ShapeError(f"extents {(h, wd)} not divisible by window side {w}")
    mh, mw = h // w, wd // w
    t = T.reshape(x, (n, c, mh, w, mw, w))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (n * mh * mw, c, w, w))


def window_merge(windows, h: int, w_img: int, batch: int | None = None) -> Tensor:
    """Inverse of :func:`window_partition`.

    Returns [C,H,W] when ``batch`` is None and the windows cover one image,
    otherwise [N,C,H,W].
    """
    windows = T.as_tensor(windows)
    if windows.ndim != 4 or windows.shape[-1] != windows.shape[-2]:
        raise ShapeError(f"windows must be [M2, C, w, w], got {windows.shape}")
    count, c, w, _ = windows.shape
    if h % w or w_img % w:
        raise ShapeError(f"extents {(h, w_img)} not divisible by window side {w}")
    mh, mw = h // w, w_img // w
    if count % (mh * mw):
        raise ShapeError(f"{count} windows cannot tile a {h}x{w_img} map with side {w}")
    n = count // (mh * mw)
    if batch is not None and batch != n:
        raise ShapeError(f"window count implies batch {n}, expected {batch}")
    t = T.reshape(windows, (n, mh, mw, c, w, w))
    t = T.transpose(t, (0, 3, 1, 4, 2, 5))
    t = T.reshape(t, (n, c, h, w_img))
    if batch is None and n == 1:
        return T.reshape(t, (c, h, w_img))
    return t


def dilated_partition(x: Tensor, w: int) -> Tensor:
    """Group tokens sharing (row mod H/w, col mod W/w) into w x w sets (interval sparse attention)."""
    n, c, h, wd = x.shape
    ih, iw = h // w, wd // w
    t = T.reshape(x, (n, c, w, ih, w, iw))
    t = T.transpose(t, (0, 3, 5, 1, 2, 4))
    return T.reshape(t, (n * ih * iw, c, w, w))


def dilated_merge(windows: Tensor, h: int, wd: int) -> Tensor:
    count, c, w, _ = windows.shape
    ih, iw = h // w, wd // w
    n = count // (ih * iw)
    t = T.reshape(windows, (n, ih, iw, c, w, w))
    t = T.transpose(t, (0, 3, 4, 1, 5, 2))
    return T.reshape(t, (n, c, h, wd))


def windows_to_tokens(win: Tensor) -> Tensor:
    b, c, w, _ = win.shape
    return T.transpose(T.reshape(win, (b, c, w * w)), (0, 2, 1))


def tokens_to_windows(tok: Tensor, w: int) -> Tensor:
    b, n, c = tok.shape
    return T.reshape(T.transpose(tok, (0, 2, 1)), (b, c, w, w))


def _split_heads(tok: Tensor, heads: int) -> Tensor:
    b, n, c = tok.shape
    return T.transpose(T.reshape(tok, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, d = t.shape
    return T.reshape(T.transpose(t, (0, 2, 1, 3)), (b, n, h * d))


# ----------------------------------------------------------------------
# relative position bias
# ----------------------------------------------------------------------

def relative_position_index(w: int) -> np.ndarray:
    """[w*w, w*w] indices into a (2w-1)^2 table, Swin layout."""
    rows, cols = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    pos = np.stack([rows.reshape(-1), cols.reshape(-1)])
    rel = pos[:, :, None] - pos[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def relative_position_bias(table, w: int) -> Tensor:
    """Gather a [(2w-1)^2, heads] table into a [heads, w*w, w*w] bias."""
    table = T.as_tensor(table)
    idx = relative_position_index(w)
    heads = table.shape[1]
    b = T.take(table, idx.reshape(-1), axis=0)
    b = T.reshape(b, (w * w, w * w, heads))
    return T.transpose(b, (2, 0, 1))


def attend(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
           modulation=None) -> Tensor:
    """softmax((q k^T / sqrt(d)) * modulation + bias) v over the last two axes."""
    d = q.shape[-1]
    logits = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    if modulation is not None:
        logits = logits * modulation
    if bias is not None:
        logits = logits + bias
    return T.matmul(T.softmax(logits, axis=-1), v)


# ----------------------------------------------------------------------
# sampling field
# ----------------------------------------------------------------------

@dataclass
class SamplingField:
    """Per-window affine sampling parameters, ``[N*M2, heads, w, w, 2]`` each.

    ``coords`` are normalized (x, y) over the full feature map.
    """

    scale: Tensor
    bias: Tensor
    coords: Tensor | None = None


def window_pixel_coords(h: int, w_img: int, w: int) -> np.ndarray:
    """Absolute (x, y) pixel-centre coordinates of every in-window position, [M2, w, w, 2]."""
    mh, mw = h // w, w_img // w
    oy, ox = np.meshgrid(np.arange(mh) * w, np.arange(mw) * w, indexing="ij")
    iy, ix = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    xs = ox.reshape(-1, 1, 1) + ix[None]
    ys = oy.reshape(-1, 1, 1) + iy[None]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def normalize_pixel_coords(px, h: int, w_img: int):
    """Pixel (x, y) -> align-corners normalized (x, y); works on arrays and tensors."""
    sx = 2.0 / (w_img - 1) if w_img > 1 else 0.0
    sy = 2.0 / (h - 1) if h > 1 else 0.0
    shift = np.array([1.0 if w_img > 1 else 0.0, 1.0 if h > 1 else 0.0])
    return px * np.array([sx, sy]) - shift


def transform_coords(scale, bias, h: int, w_img: int, w: int) -> Tensor:
    """``absolute_coord * scale + bias`` in pixels, then normalized over the whole map.

    ``scale`` and ``bias`` are [N*M2, heads, w, w, 2]; returns the same shape.
    """
    scale, bias = T.as_tensor(scale), T.as_tensor(bias)
    base = window_pixel_coords(h, w_img, w)  # [M2, w, w, 2]
    m2 = base.shape[0]
    b, heads = scale.shape[:2]
    if b % m2:
        raise ShapeError(f"{b} windows do not match {m2} windows per image")
    n = b // m2
    s = T.reshape(scale, (n, m2, heads, w, w, 2))
    o = T.reshape(bias, (n, m2, heads, w, w, 2))
    g = normalize_pixel_coords(s * base[:, None] + o, h, w_img)
    return T.reshape(g, scale.shape)


class OffsetLearner(Module):
    """conv3x3 -> GELU -> per-window average pool -> linear scale / bias heads.

    Heads start at exactly scale 1, bias 0 so sampling begins as the identity.
    """

    def __init__(self, rng, channels: int, heads: int, w: int):
        self.w = w
        self.heads = heads
        self.conv = Conv2d(rng, channels, channels, 3)
        self.scale_head = Linear(rng, channels, 2 * heads * w * w, zero=True)
        self.bias_head = Linear(rng, channels, 2 * heads * w * w, zero=True)
        self.scale_head.bias.data[:] = 1.0

    def forward(self, x: Tensor, activation: bool = True) -> SamplingField:
        f = self.conv(x)
        if activation:
            f = T.gelu(f)
        pooled = T.mean(window_partition(f, self.w), axis=(-2, -1))  # [N*M2, C]
        shape = (pooled.shape[0], self.heads, self.w, self.w, 2)
        return SamplingField(T.reshape(self.scale_head(pooled), shape),
                             T.reshape(self.bias_head(pooled), shape))


def learn_offsets(learner: OffsetLearner, x, c, activation: bool = True) -> SamplingField:
    """Sampling field from the constraint-gated feature ``x * c``."""
    x, c = T.as_tensor(x), T.as_tensor(c)
    if x.shape[-2:] != c.shape[-2:] or x.ndim != c.ndim:
        raise ShapeError(f"feature {x.shape} and constraint {c.shape} disagree")
    xb, _ = _as_batched(x * c)
    return learner(xb, activation=activation)


# ----------------------------------------------------------------------
# uncertainty-derived constants
# ----------------------------------------------------------------------

def _constraint(sigma: np.ndarray | None, shape, cfg: AttentionBlockConfig) -> np.ndarray | None:
    if sigma is None or cfg.ssa_mode == "none":
        return None
    if cfg.ssa_mode == "ranked":
        return U.constraint_matrix(sigma, cfg.gamma, cfg.beta).data
    peak = sigma.max(axis=(-2, -1), keepdims=True)
    return sigma / peak


def lr_modulation(sigma_windows: np.ndarray, cfg: AttentionBlockConfig) -> np.ndarray | None:
    """[B, 1, T, T] logit modulation for windows of sigma ([B, C_u, w, w])."""
    if cfg.lr_mode == "none":
        return None
    cr = U.correlation_map(sigma_windows).data
    if cfg.lr_mode == "ranked":
        mask = U.topk_row_mask(cr, cfg.k_fraction)
        return U.modulation_matrix(mask, cfg.alpha).data[:, None]
    soft = cr / cr.max(axis=-1, keepdims=True)
    return (-cfg.alpha * soft + (1.0 + cfg.alpha))[:, None]


def _sigma_windows(sigma: np.ndarray, w: int) -> np.ndarray:
    n, c, h, wd = sigma.shape
    s = sigma.reshape(n, c, h // w, w, wd // w, w).transpose(0, 2, 4, 1, 3, 5)
    return s.reshape(-1, c, w, w)


# ----------------------------------------------------------------------
# token mixers
# ----------------------------------------------------------------------

class SparseSamplingAttention(Module):
    """Window queries attend to keys/values bilinearly sampled at learned global coordinates."""

    def __init__(self, rng, channels: int, cfg: AttentionBlockConfig):
        if channels % cfg.heads:
            raise ConfigError(f"{channels} channels not divisible by {cfg.heads} heads")
        self.cfg = cfg
        w = cfg.window_side
        self.q = Linear(rng, channels, channels)
        # no key/value bias: a key bias shifts each logit row uniformly (dead under softmax)
        # and a value bias duplicates the output projection bias
        self.kv = Linear(rng, channels, 2 * channels, bias=False)
        self.proj = Linear(rng, channels, channels, zero=True)
        self.rel_table = param(trunc_normal(rng, ((2 * w - 1) ** 2, cfg.heads)))
        self.offsets = OffsetLearner(rng, channels, cfg.heads, w)

    def field(self, x: Tensor, sigma: np.ndarray | None) -> SamplingField:
        n, c, h, wd = x.shape
        gate = _constraint(sigma, x.shape, self.cfg)
        gated = x if gate is None else x * gate
        fld = self.offsets(gated)
        fld.coords = transform_coords(fld.scale, fld.bias, h, wd, self.cfg.window_side)
        return fld

    def sample_kv(self, x: Tensor, coords: Tensor) -> tuple[Tensor, Tensor]:
        """Project K/V on the full map, then sample each head's channels at its coordinates.

        Projection commutes with bilinear sampling (weights sum to one), so this
        equals projecting the sampled features.
        """
        n, c, h, wd = x.shape
        heads, w = self.cfg.heads, self.cfg.window_side
        d = c // heads
        kv = self.kv(T.transpose(x, (0, 2, 3, 1)))  # [N, H, W, 2C]
        kv = T.reshape(kv, (n, h, wd, 2, heads, d))
        kv = T.transpose(kv, (0, 4, 3, 5, 1, 2))  # [N, heads, 2, d, H, W]
        kv = T.reshape(kv, (n * heads, 2 * d, h, wd))
        m2 = coords.shape[0] // n
        g = T.reshape(coords, (n, m2, heads, w * w, 2))
        g = T.transpose(g, (0, 2, 1, 3, 4))
        g = T.reshape(g, (n * heads, m2 * w * w, 2))
        s = T.grid_sample_bilinear(kv, g)  # [N*heads, 2d, M2*w*w]
        s = T.reshape(s, (n, heads, 2, d, m2, w * w))
        s = T.transpose(s, (2, 0, 4, 1, 5, 3))  # [2, N, M2, heads, w*w, d]
        s = T.reshape(s, (2, n * m2, heads, w * w, d))
        return s[0], s[1]

    def forward(self, x: Tensor, sigma: np.ndarray | None = None, fld: SamplingField | None = None) -> Tensor:
        n, c, h, wd = x.shape
        w, heads = self.cfg.window_side, self.cfg.heads
        if fld is None:
            fld = self.field(x, sigma)
        q = _split_heads(self.q(windows_to_tokens(window_partition(x, w))), heads)
        k, v = self.sample_kv(x, fld.coords)
        out = attend(q, k, v, relative_position_bias(self.rel_table, w))
        out = self.proj(_merge_heads(out))
        return window_merge(tokens_to_windows(out, w), h, wd, batch=n)


class LocalReconstructionAttention(Module):
    """In-window attention whose logits are modulated by the uncertainty correlation ranking.

    With ``interval=True`` tokens are grouped at a fixed stride across the
    image instead of contiguous windows (interval sparse attention).
    """

    def __init__(self, rng, channels: int, cfg: AttentionBlockConfig, interval: bool = False):
        if channels % cfg.heads:
            raise ConfigError(f"{channels} channels not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.interval = interval
        w = cfg.window_side
        self.q = Linear(rng, channels, channels)
        self.kv = Linear(rng, channels, 2 * channels, bias=False)
        self.proj = Linear(rng, channels, channels, zero=True)
        self.rel_table = param(trunc_normal(rng, ((2 * w - 1) ** 2, cfg.heads)))

    def forward(self, x: Tensor, sigma: np.ndarray | None = None) -> Tensor:
        n, c, h, wd = x.shape
        w, heads = self.cfg.window_side, self.cfg.heads
        part = dilated_partition if self.interval else window_partition
        tok = windows_to_tokens(part(x, w))
        q = _split_heads(self.q(tok), heads)
        kv = T.reshape(self.kv(tok), (tok.shape[0], w * w, 2, heads, c // heads))
        kv = T.transpose(kv, (2, 0, 3, 1, 4))
        mod = None
        if sigma is not None and not self.interval:
            mod = lr_modulation(_sigma_windows(sigma, w), self.cfg)
        out = attend(q, kv[0], kv[1], relative_position_bias(self.rel_table, w), mod)
        out = tokens_to_windows(self.proj(_merge_heads(out)), w)
        if self.interval:
            return dilated_merge(out, h, wd)
        return window_merge(out, h, wd, batch=n)


class ChannelAttention(Module):
    """Transposed (channel-by-channel) attention with L2-normalized q, k and a learned temperature."""

    def __init__(self, rng, channels: int, cfg: AttentionBlockConfig):
        self.cfg = cfg
        self.qkv = Linear(rng, channels, 3 * channels)
        self.proj = Linear(rng, channels, channels, zero=True)
        self.temperature = param(np.ones((1, cfg.heads, 1, 1)))

    def forward(self, x: Tensor, sigma: np.ndarray | None = None) -> Tensor:
        n, c, h, wd = x.shape
        heads = self.cfg.heads
        d = c // heads
        tok = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * wd, c))
        qkv = T.reshape(self.qkv(tok), (n, h * wd, 3, heads, d))
        qkv = T.transpose(qkv, (2, 0, 3, 4, 1))  # [3, N, heads, d, HW]
        q, k, v = qkv[0], qkv[1], qkv[2]
        q = q * T.rsqrt(T.sum(q * q, axis=-1, keepdims=True) + 1e-12)
        k = k * T.rsqrt(T.sum(k * k, axis=-1, keepdims=True) + 1e-12)
        attn = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * self.temperature, axis=-1)
        out = T.matmul(attn, v)  # [N, heads, d, HW]
        out = T.transpose(T.reshape(out, (n, c, h * wd)), (0, 2, 1))
        out = self.proj(out)
        return T.transpose(T.reshape(out, (n, h, wd, c)), (0, 3, 1, 2))


# ----------------------------------------------------------------------
# IRM block
# ----------------------------------------------------------------------

class IRMBlock(Module):
    """Pre-norm transformer block: ``x + mixer(norm(x))`` then ``+ FFN(norm(.))``.

    ``kind`` is ``"ssa"`` or ``"lr"``.  An SSA slot uses the mixer selected by
    ``cfg.mixer``; ``wsa`` is LR attention with modulation disabled.
    """

    def __init__(self, rng, channels: int, cfg: AttentionBlockConfig, kind: str):
        if kind not in ("ssa", "lr"):
            raise ConfigError(f"unknown IRM kind {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.norm1 = ChannelNorm(channels)
        if kind == "lr":
            self.attn = LocalReconstructionAttention(rng, channels, cfg)
        elif cfg.mixer == "ssa":
            self.attn = SparseSamplingAttention(rng, channels, cfg)
        elif cfg.mixer == "wsa":
            self.attn = LocalReconstructionAttention(rng, channels, replace(cfg, lr_mode="none"))
        elif cfg.mixer == "sa":
            self.attn = LocalReconstructionAttention(rng, channels, replace(cfg, lr_mode="none"), interval=True)
        else:
            self.attn = ChannelAttention(rng, channels, cfg)
        self.norm2 = LayerNorm(channels)
        self.ffn = FeedForward(rng, channels)

    def forward(self, x: Tensor, sigma: np.ndarray | None = None) -> Tensor:
        w = self.cfg.window_side
        if x.shape[-2] % w or x.shape[-1] % w:
            raise ShapeError(f"feature extents {x.shape[-2:]} not divisible by window {w}")
        x = x + self.attn(self.norm1(x), sigma)
        t = T.transpose(x, (0, 2, 3, 1))
        t = self.ffn(self.norm2(t))
        return x + T.transpose(t, (0, 3, 1, 2))


def irm_kinds(n_blocks: int) -> list[str]:
    """Alternation SSA, LR, SSA, ... starting with SSA."""
    return ["ssa" if i % 2 == 0 else "lr" for i in range(n_blocks)]
