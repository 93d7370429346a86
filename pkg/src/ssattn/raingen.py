"""Procedural paired rain data.

A degraded image is composed from a clean background ``B``, an additive
streak map ``S``, a binary drop mask ``M`` and a drop appearance layer ``D``:

    R = (1 - M) * (B + S) + eta * D

Everything stays in float64 and unclamped until PNG export.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ShapeError

MODES = ("RS", "RD", "RDS")


@dataclass(frozen=True)
class GenConfig:
    mode: str = "RDS"
    size: tuple[int, int] = (96, 96)
    shape_count: tuple[int, int] = (3, 8)
    noise_amplitude: float = 0.03
    streak_count: tuple[int, int] = (40, 90)
    streak_angle: tuple[float, float] = (70.0, 110.0)  # degrees from the +x axis
    streak_jitter: float = 8.0
    streak_length: tuple[float, float] = (8.0, 22.0)
    streak_width: int = 1
    streak_intensity: tuple[float, float] = (0.3, 0.6)
    streak_blur: int = 3
    drop_count: tuple[int, int] = (4, 10)
    drop_radius: tuple[float, float] = (4.0, 9.0)
    drop_blur: float = 2.0
    eta: tuple[float, float] = (0.8, 1.0)
    seed: int = 0

    def __post_init__(self):
        mode = str(self.mode).upper()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        for name in ("size", "shape_count", "streak_count", "streak_angle", "streak_length",
                     "streak_intensity", "drop_count", "drop_radius", "eta"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: ({lo}, {hi})")
            object.__setattr__(self, name, (type(lo)(lo), type(hi)(hi)))
        if min(self.size) < 1:
            raise ConfigError("image size must be positive")
        if not 0.0 <= self.noise_amplitude <= 0.05:
            raise ConfigError("noise_amplitude must lie in [0, 0.05]")
        if not 0.0 <= self.streak_jitter <= 10.0:
            raise ConfigError("streak_jitter must lie in [0, 10] degrees")
        if self.streak_width < 1 or self.streak_blur < 1:
            raise ConfigError("streak_width and streak_blur must be >= 1")
        if self.eta[0] < 0.0 or self.eta[1] > 1.0:
            raise ConfigError("eta range must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class RainScene:
    background: np.ndarray  # [3, H, W]
    streaks: np.ndarray  # [3, H, W]
    drop_mask: np.ndarray  # [1, H, W]
    drop_layer: np.ndarray  # [3, H, W]
    eta: float
    degraded: np.ndarray  # [3, H, W], unclamped
    meta: dict = field(default_factory=dict)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one sample, derived from (seed, index)."""
    return np.random.default_rng([seed, index])


def _randint(rng, lo_hi) -> int:
    return int(rng.integers(lo_hi[0], lo_hi[1] + 1))


def _uniform(rng, lo_hi) -> float:
    return float(rng.uniform(lo_hi[0], lo_hi[1]))


# ----------------------------------------------------------------------
# background
# ----------------------------------------------------------------------

def gen_background(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Colour gradient, a few flat shapes and low-amplitude value noise, in [0, 1]."""
    h, w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    span = proj.max() - proj.min()
    t = (proj - proj.min()) / span if span > 0 else np.zeros_like(proj)
    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]

    for _ in range(_randint(rng, cfg.shape_count)):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            hh, hw = rng.uniform(0.05, 0.3) * h, rng.uniform(0.05, 0.3) * w
            inside = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:
            r = rng.uniform(0.05, 0.25) * min(h, w)
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, inside] = color[:, None]

    if cfg.noise_amplitude > 0:
        coarse = rng.uniform(-1.0, 1.0, size=(3, h // 8 + 2, w // 8 + 2))
        fine = ndimage.zoom(coarse, (1, (h + 8) / coarse.shape[1], (w + 8) / coarse.shape[2]), order=1)
        img = img + cfg.noise_amplitude * fine[:, :h, :w]
    return np.clip(img, 0.0, 1.0)


# ----------------------------------------------------------------------
# streaks
# ----------------------------------------------------------------------

def draw_streak(canvas: np.ndarray, x0: float, y0: float, angle_deg: float,
                length: float, intensity: float) -> None:
    """Splat an anti-aliased 1-pixel segment into a [H, W] canvas (in place).

    Points every half pixel along the segment deposit ``intensity / 2``
    bilinearly, so a segment lying on a pixel row touches only that row.
    """
    h, w = canvas.shape
    a = math.radians(angle_deg)
    dx, dy = math.cos(a), math.sin(a)
    n = max(int(math.ceil(length * 2)), 1)
    t = np.arange(n + 1) * (length / n)
    px, py = x0 + t * dx, y0 + t * dy
    ix, iy = np.floor(px).astype(int), np.floor(py).astype(int)
    fx, fy = px - ix, py - iy
    amount = intensity * length / n
    for ox, oy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cx, cy = ix + ox, iy + oy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h) & (wt > 0)
        np.add.at(canvas, (cy[ok], cx[ok]), amount * wt[ok])


def directional_box_blur(canvas: np.ndarray, angle_deg: float, taps: int) -> np.ndarray:
    """Average of ``taps`` copies shifted along the streak direction."""
    if taps <= 1:
        return canvas.copy()
    a = math.radians(angle_deg)
    dx, dy = math.cos(a), math.sin(a)
    out = np.zeros_like(canvas)
    offsets = np.arange(taps) - (taps - 1) / 2.0
    for s in offsets:
        out += ndimage.shift(canvas, (s * dy, s * dx), order=1, mode="constant", cval=0.0)
    return np.maximum(out / taps, 0.0)


def gen_streaks(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Additive streak map [3, H, W]; streaks share one direction up to jitter."""
    h, w = cfg.size
    count = _randint(rng, cfg.streak_count)
    base = _uniform(rng, cfg.streak_angle)
    canvas = np.zeros((h, w))
    for _ in range(count):
        angle = base + rng.uniform(-cfg.streak_jitter, cfg.streak_jitter)
        length = _uniform(rng, cfg.streak_length)
        intensity = _uniform(rng, cfg.streak_intensity)
        x0, y0 = rng.uniform(-0.25 * w, w), rng.uniform(-0.25 * h, h)
        nx, ny = -math.sin(math.radians(angle)), math.cos(math.radians(angle))
        for k in range(cfg.streak_width):
            off = k - (cfg.streak_width - 1) / 2.0
            draw_streak(canvas, x0 + off * nx, y0 + off * ny, angle, length, intensity)
    canvas = directional_box_blur(canvas, base, cfg.streak_blur)
    return np.repeat(canvas[None], 3, axis=0)


# ----------------------------------------------------------------------
# drops
# ----------------------------------------------------------------------

def stamp_ellipse(mask: np.ndarray, cx: float, cy: float, rx: float, ry: float,
                  theta: float = 0.0) -> None:
    """Set pixels whose centre lies inside the (rotated) ellipse to 1, in place."""
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    mask[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = 1.0


def drop_appearance(background: np.ndarray, mask: np.ndarray, blur: float,
                    gain: float = 0.85, lift: float = 0.2) -> np.ndarray:
    """Blurred, brightened copy of the background restricted to the drop mask."""
    soft = ndimage.gaussian_filter(background, sigma=(0, blur, blur), mode="nearest")
    return np.clip(gain * soft + lift, 0.0, 1.0) * mask


def gen_drops(cfg: GenConfig, background: np.ndarray,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Binary drop mask [1, H, W] and drop layer [3, H, W] (zero off the mask)."""
    h, w = cfg.size
    mask = np.zeros((h, w))
    for _ in range(_randint(rng, cfg.drop_count)):
        rx = _uniform(rng, cfg.drop_radius)
        ry = rx * rng.uniform(0.7, 1.0)
        stamp_ellipse(mask, rng.uniform(0, w), rng.uniform(0, h), rx, ry,
                      rng.uniform(0.0, math.pi))
    mask = mask[None]
    return mask, drop_appearance(background, mask, cfg.drop_blur)


# ----------------------------------------------------------------------
# composition
# ----------------------------------------------------------------------

def compose(background, streaks, drop_mask, drop_layer, eta: float) -> RainScene:
    b, s, m, d = (np.asarray(a, dtype=np.float64) for a in (background, streaks, drop_mask, drop_layer))
    if b.shape != s.shape or b.shape != d.shape or m.shape != (1, *b.shape[1:]):
        raise ShapeError(f"scene parts disagree: B {b.shape}, S {s.shape}, M {m.shape}, D {d.shape}")
    r = (1.0 - m) * (b + s) + eta * d
    return RainScene(b, s, m, d, float(eta), r)


def generate_scene(cfg: GenConfig, index: int) -> RainScene:
    rng = sample_rng(cfg.seed, index)
    h, w = cfg.size
    b = gen_background(cfg, rng)
    s = gen_streaks(cfg, rng) if cfg.mode in ("RS", "RDS") else np.zeros((3, h, w))
    if cfg.mode in ("RD", "RDS"):
        m, d = gen_drops(cfg, b, rng)
    else:
        m, d = np.zeros((1, h, w)), np.zeros((3, h, w))
    eta = _uniform(rng, cfg.eta)
    scene = compose(b, s, m, d, eta)
    scene.meta = {"index": index, "seed": [cfg.seed, index], "eta": eta,
                  "drop_pixels": int(m.sum()), "streak_energy": float(s.sum())}
    return scene


# ----------------------------------------------------------------------
# files
# ----------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3, H, W] float -> [H, W, 3] uint8, clamping to [0, 1]."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_dataset(root, cfg: GenConfig, count: int) -> Path:
    """Write ``count`` pairs under ``<root>/<mode>/`` plus manifest.json."""
    out = Path(root) / cfg.mode.lower()
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(count):
        scene = generate_scene(cfg, i)
        save_png(out / f"{i:05d}_clean.png", scene.background)
        save_png(out / f"{i:05d}_rain.png", scene.degraded)
        samples.append(scene.meta)
    manifest = {"config": cfg.to_dict(), "count": count, "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def dataset_dir(root) -> Path:
    """Resolve a dataset root: either the mode directory itself or its parent."""
    root = Path(root)
    if (root / "manifest.json").exists():
        return root
    hits = sorted(p.parent for p in root.glob("*/manifest.json"))
    if len(hits) != 1:
        raise FileNotFoundError(f"no unique dataset manifest under {root}")
    return hits[0]


def load_pairs(root) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Names, degraded [N, 3, H, W] and clean [N, 3, H, W] arrays of a dataset."""
    d = dataset_dir(root)
    manifest = json.loads((d / "manifest.json").read_text())
    names, rain, clean = [], [], []
    for s in manifest["samples"]:
        stem = f"{s['index']:05d}"
        names.append(stem)
        rain.append(load_png(d / f"{stem}_rain.png"))
        clean.append(load_png(d / f"{stem}_clean.png"))
    if not names:
        return names, np.zeros((0, 3, 0, 0)), np.zeros((0, 3, 0, 0))
    return names, np.stack(rain), np.stack(clean)
