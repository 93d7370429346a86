"""Figure-style renderings: sampled coordinates of one window, uncertainty heatmaps, derained output."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw

from .attention import SparseSamplingAttention
from .errors import ConfigError
from .model import Deraformer
from .raingen import save_png, to_uint8

COLORMAP = "viridis"
HEAD_COLORS = [(255, 64, 64), (64, 160, 255), (255, 200, 0), (0, 220, 120),
               (220, 80, 255), (255, 128, 0), (0, 230, 230), (255, 255, 255)]


@dataclass
class SamplingView:
    level: int
    window: int
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in input pixels (inclusive centres)
    points: np.ndarray  # [heads, w*w, 2] (x, y) in input pixels


@dataclass
class VisualizeResult:
    sampling: SamplingView
    paths: list[Path] = field(default_factory=list)


def _first_ssa(model: Deraformer, level: int) -> SparseSamplingAttention:
    stage = next((s for s in model.decoder if s.level == level), None)
    if stage is None:
        raise ConfigError(f"no decoder stage at level {level}")
    for blk in stage.blocks:
        if isinstance(blk.attn, SparseSamplingAttention):
            return blk.attn
    raise ConfigError(f"stage {level} has no sparse-sampling block")


def sampling_view(model: Deraformer, image: np.ndarray, window: int = 0, level: int = 0):
    """Run the model once, recording the sampling field of the stage's first SSA block.

    Returns the model output and a :class:`SamplingView` in input-pixel units.
    """
    attn = _first_ssa(model, level)
    captured = {}
    original = attn.field

    def recording(x, sigma):
        fld = original(x, sigma)
        captured["coords"], captured["shape"] = fld.coords.data, x.shape
        return fld

    attn.field = recording
    try:
        out = model(image)
    finally:
        del attn.field
    coords, (_, _, h, w_img) = captured["coords"], captured["shape"]
    ws = model.cfg.window_side
    windows = (h // ws) * (w_img // ws)
    if not 0 <= window < windows:
        raise ConfigError(f"window index {window} out of range [0, {windows})")
    c = coords[window]  # [heads, w, w, 2]
    px = (c[..., 0] + 1.0) * 0.5 * (w_img - 1)
    py = (c[..., 1] + 1.0) * 0.5 * (h - 1)
    f = 2 ** level
    # feature-pixel centre p covers input pixels [p*f, p*f + f - 1]
    pts = np.stack([(px + 0.5) * f - 0.5, (py + 0.5) * f - 0.5], axis=-1).reshape(c.shape[0], -1, 2)
    wy, wx = divmod(window, w_img // ws)
    box = (wx * ws * f, wy * ws * f, (wx + 1) * ws * f - 1, (wy + 1) * ws * f - 1)
    return out, SamplingView(level, window, tuple(float(v) for v in box), pts)


def heatmap(sigma: np.ndarray) -> np.ndarray:
    """[H, W] values -> [H, W, 3] uint8 after per-image min-max normalization."""
    lo, hi = float(sigma.min()), float(sigma.max())
    norm = (sigma - lo) / (hi - lo) if hi > lo else np.zeros_like(sigma)
    rgb = colormaps[COLORMAP](norm)[..., :3]
    return np.round(rgb * 255.0).astype(np.uint8)


def render_sampling(image: np.ndarray, view: SamplingView, zoom: int = 4) -> Image.Image:
    canvas = Image.fromarray(to_uint8(image), mode="RGB")
    canvas = canvas.resize((canvas.width * zoom, canvas.height * zoom), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)

    def to_canvas(x, y):
        return (x + 0.5) * zoom, (y + 0.5) * zoom

    x0, y0, x1, y1 = view.box
    draw.rectangle([x0 * zoom, y0 * zoom, (x1 + 1) * zoom - 1, (y1 + 1) * zoom - 1],
                   outline=(255, 255, 255), width=1)
    r = max(1, zoom // 2)
    for head, pts in enumerate(view.points):
        color = HEAD_COLORS[head % len(HEAD_COLORS)]
        for x, y in pts:
            cx, cy = to_canvas(x, y)
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    return canvas


def visualize(model: Deraformer, image: np.ndarray, out_dir, window: int = 0,
              level: int = 0, zoom: int = 4) -> VisualizeResult:
    """Write sampling.png, sigma_stage<k>.png (coarsest first) and derained.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out, view = sampling_view(model, image, window, level)
    paths = []
    p = out_dir / "sampling.png"
    render_sampling(image, view, zoom).save(p, format="PNG")
    paths.append(p)
    for k, stage in enumerate(out.stages):
        sigma = np.exp(stage.log_sigma.data[0])
        p = out_dir / f"sigma_stage{k}.png"
        Image.fromarray(heatmap(sigma), mode="RGB").save(p, format="PNG")
        paths.append(p)
    p = out_dir / "derained.png"
    save_png(p, out.final.data)
    paths.append(p)
    return VisualizeResult(view, paths)
