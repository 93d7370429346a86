"""Toy-scale deraining network: conv encoder, global transformer latent, IRM decoder.

Each decoder stage ends in a 1x1 head that emits a residual image and a
log-scale uncertainty map.  The same head is also read before every IRM
block of its stage, so each block is steered by the uncertainty of the
features it receives.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import AttentionBlockConfig, IRMBlock, irm_kinds
from .errors import ConfigError, ShapeError
from .nn import ChannelNorm, Conv2d, FeedForward, LayerNorm, Linear, Module
from .tensor import Tensor
from .uncertainty import udl_loss

_LOG10_SCALE = 10.0 / math.log(10.0)
MSE_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    irm_blocks: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 4)
    latent_blocks: int = 2
    latent_heads: int = 4
    window_side: int = 4
    beta: float = 0.6
    gamma: float = 0.8
    alpha: float = 0.2
    k_fraction: float = 0.8
    ssa_mode: str = "ranked"
    lr_mode: str = "ranked"
    mixer: str = "ssa"
    init_seed: int = 0

    def __post_init__(self):
        for name in ("channels", "irm_blocks", "heads"):
            value = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != self.levels:
                raise ConfigError(f"{name} needs {self.levels} entries, got {len(value)}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError("channels must strictly increase with depth")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ConfigError(f"{c} channels not divisible by {h} heads")
        if self.channels[-1] % self.latent_heads:
            raise ConfigError("latent channels not divisible by latent_heads")
        self.attention(0)  # validates ranking params

    def attention(self, level: int) -> AttentionBlockConfig:
        return AttentionBlockConfig(
            window_side=self.window_side, heads=self.heads[level], beta=self.beta,
            gamma=self.gamma, alpha=self.alpha, k_fraction=self.k_fraction,
            ssa_mode=self.ssa_mode, lr_mode=self.lr_mode, mixer=self.mixer)

    @property
    def multiple(self) -> int:
        """Input extents are padded to a multiple of this."""
        return self.window_side * 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class StageOutput:
    derained: Tensor
    log_sigma: Tensor


@dataclass
class ModelOutput:
    final: Tensor
    stages: list[StageOutput] = field(default_factory=list)
    sigmas: list[list[np.ndarray]] = field(default_factory=list)


# ----------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------

class ConvNormAct(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1):
        self.stride = stride
        self.conv = Conv2d(rng, c_in, c_out, 3)
        self.norm = ChannelNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.stride == 2:
            y = y[:, :, ::2, ::2]
        return T.gelu(self.norm(y))


class EncoderLevel(Module):
    """Entry conv (strided below level 0) then a residual pair of conv-norm-act blocks."""

    def __init__(self, rng, c_in: int, c_out: int, downsample: bool):
        self.entry = ConvNormAct(rng, c_in, c_out, stride=2 if downsample else 1)
        self.body = [ConvNormAct(rng, c_out, c_out), ConvNormAct(rng, c_out, c_out)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.entry(x)
        y = x
        for blk in self.body:
            y = blk(y)
        return x + y


class GlobalAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.kv = Linear(rng, dim, 2 * dim, bias=False)
        self.proj = Linear(rng, dim, dim, zero=True)

    def forward(self, tok: Tensor) -> Tensor:
        n, L, c = tok.shape
        d = c // self.heads
        q = T.transpose(T.reshape(self.q(tok), (n, L, self.heads, d)), (0, 2, 1, 3))
        kv = T.transpose(T.reshape(self.kv(tok), (n, L, 2, self.heads, d)), (2, 0, 3, 1, 4))
        logits = T.scale(T.matmul(q, T.swapaxes(kv[0], -1, -2)), 1.0 / math.sqrt(d))
        out = T.matmul(T.softmax(logits, axis=-1), kv[1])
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, L, c))
        return self.proj(out)


class TransformerBlock(Module):
    """Vanilla pre-norm ViT block over all tokens of the latent map."""

    def __init__(self, rng, dim: int, heads: int):
        self.norm1 = LayerNorm(dim)
        self.attn = GlobalAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tok = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))
        tok = tok + self.attn(self.norm1(tok))
        tok = tok + self.ffn(self.norm2(tok))
        return T.transpose(T.reshape(tok, (n, h, w, c)), (0, 3, 1, 2))


class DecoderStage(Module):
    def __init__(self, rng, cfg: ModelConfig, level: int):
        c = cfg.channels[level]
        self.level = level
        self.has_up = level < cfg.levels - 1
        if self.has_up:
            self.up = Conv2d(rng, cfg.channels[level + 1], c, 3)
            self.fuse = Conv2d(rng, 2 * c, c, 1)
        acfg = cfg.attention(level)
        self.blocks = [IRMBlock(rng, c, acfg, kind) for kind in irm_kinds(cfg.irm_blocks[level])]
        # 3 residual-image channels + 1 log-sigma channel
        self.head = Conv2d(rng, c, 4, 1, zero=True)

    def forward(self, feat: Tensor, skip: Tensor | None, image: Tensor):
        if self.has_up:
            feat = self.up(T.upsample_nearest(feat, 2))
            feat = self.fuse(T.concat([feat, skip], axis=1))
        sigmas = []
        for blk in self.blocks:
            sigma = np.exp(self.head(feat).data[:, 3:4])
            sigmas.append(sigma)
            feat = blk(feat, sigma)
        out = self.head(feat)
        stage = StageOutput(image + out[:, 0:3], out[:, 3:4])
        return feat, stage, sigmas


class Deraformer(Module):
    """Encoder -> latent transformer -> IRM decoder; output = input + residual."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        ch = cfg.channels
        self.encoder = [EncoderLevel(rng, 3 if i == 0 else ch[i - 1], ch[i], downsample=i > 0)
                        for i in range(cfg.levels)]
        self.latent = [TransformerBlock(rng, ch[-1], cfg.latent_heads) for _ in range(cfg.latent_blocks)]
        self.decoder = [DecoderStage(rng, cfg, lvl) for lvl in reversed(range(cfg.levels))]

    def pad(self, x: Tensor) -> Tensor:
        m = self.cfg.multiple
        h, w = x.shape[-2:]
        return T.pad_reflect(x, (0, (-h) % m), (0, (-w) % m))

    def forward(self, x) -> ModelOutput:
        x = T.as_tensor(x)
        unbatched = x.ndim == 3
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a 3-channel image, got shape {x.shape}")
        h, w = x.shape[-2:]
        xp = self.pad(x)
        skips = []
        feat = xp
        for enc in self.encoder:
            feat = enc(feat)
            skips.append(feat)
        for blk in self.latent:
            feat = blk(feat)
        stages, sigmas = [], []
        for stage in self.decoder:
            lvl = stage.level
            image = T.avg_pool(xp, 2 ** lvl) if lvl else xp
            feat, out, sig = stage(feat, skips[lvl] if stage.has_up else None, image)
            hs, ws = -(-h // 2 ** lvl), -(-w // 2 ** lvl)
            out = StageOutput(out.derained[:, :, :hs, :ws], out.log_sigma[:, :, :hs, :ws])
            if unbatched:
                out = StageOutput(out.derained[0], out.log_sigma[0])
            stages.append(out)
            sigmas.append(sig)
        final = stages[-1].derained
        return ModelOutput(final=final, stages=stages, sigmas=sigmas)

    def stage_targets(self, gt) -> list[Tensor]:
        """Ground truth area-averaged to each stage's scale (coarsest first)."""
        gt = T.as_tensor(gt)
        unbatched = gt.ndim == 3
        g = T.reshape(gt, (1,) + gt.shape) if unbatched else gt
        h, w = g.shape[-2:]
        gp = self.pad(g).data
        out = []
        for stage in self.decoder:
            f = 2 ** stage.level
            hs, ws = -(-h // f), -(-w // f)
            t = T.avg_pool(gp, f).data if f > 1 else gp
            t = t[:, :, :hs, :ws]
            out.append(Tensor(t[0] if unbatched else t))
        return out


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def psnr_loss(pred, gt) -> Tensor:
    """Negative PSNR (peak 1): ``10 log10(MSE + 1e-12)``, averaged over the batch."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"{pred.shape} vs {gt.shape}")
    diff = pred - gt
    axes = (-3, -2, -1) if pred.ndim >= 3 else None
    mse = T.mean(diff * diff, axis=axes)
    return T.mean(T.scale(T.ln(mse + MSE_FLOOR), _LOG10_SCALE))


def edge_loss(pred, gt) -> Tensor:
    """Mean |d_x pred - d_x gt| plus mean |d_y pred - d_y gt| (forward differences)."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"{pred.shape} vs {gt.shape}")
    d = pred - gt
    dx = d[..., :, 1:] - d[..., :, :-1]
    dy = d[..., 1:, :] - d[..., :-1, :]
    return T.mean(T.absolute(dx)) + T.mean(T.absolute(dy))


@dataclass(frozen=True)
class LossWeights:
    psnr: float = 1.0
    edge: float = 0.2
    udl: float = 1.0


@dataclass
class LossBreakdown:
    total: Tensor
    psnr_term: float
    edge_term: float
    udl_term: float
    udl_stages: list[float]


def total_loss(outputs: ModelOutput, gt, weights: LossWeights = LossWeights(),
               stage_gts: list | None = None, model: Deraformer | None = None) -> LossBreakdown:
    """Weighted PSNR + edge loss on the final image plus per-stage uncertainty losses.

    Stage targets come from ``stage_gts`` or, given ``model``, from
    :meth:`Deraformer.stage_targets`.
    """
    gt = T.as_tensor(gt)
    if stage_gts is None:
        if model is None:
            raise ValueError("need stage_gts or model to build per-stage targets")
        stage_gts = model.stage_targets(gt)
    lp = psnr_loss(outputs.final, gt)
    le = edge_loss(outputs.final, gt)
    udls = [udl_loss(s.derained, g, s.log_sigma) for s, g in zip(outputs.stages, stage_gts)]
    total = T.scale(lp, weights.psnr) + T.scale(le, weights.edge)
    lu = None
    for u in udls:
        lu = u if lu is None else lu + u
    if lu is not None:
        total = total + T.scale(lu, weights.udl)
    return LossBreakdown(total=total, psnr_term=lp.item(), edge_term=le.item(),
                         udl_term=lu.item() if lu is not None else 0.0,
                         udl_stages=[u.item() for u in udls])
