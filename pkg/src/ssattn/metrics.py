"""PSNR and SSIM on the luminance channel."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_STD = 1.5
K1, K2 = 0.01, 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def rgb_to_y(img) -> np.ndarray:
    """Full-range BT.601 luma of a [3, H, W] (or [N, 3, H, W]) image, keeping the channel axis."""
    img = _arr(img)
    if img.ndim < 3 or img.shape[-3] != 3:
        raise ShapeError(f"expected 3 colour channels on axis -3, got {img.shape}")
    return np.einsum("c,...chw->...hw", LUMA, img)[..., None, :, :]


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, std: float = SSIM_STD) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is its outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * std * std))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering of the last two axes."""
    x = sliding_window_view(x, g.size, axis=-1) @ g
    return sliding_window_view(x, g.size, axis=-2) @ g


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (std 1.5) over the valid region."""
    return float(np.mean(ssim_map(a, b, data_range)))


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["images", "mean"],
    "properties": {
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "psnr_db", "ssim", "input_psnr_db", "input_ssim"],
                "properties": {
                    "name": {"type": "string"},
                    "psnr_db": {"type": "number", "maximum": PSNR_CAP},
                    "ssim": {"type": "number", "minimum": -1, "maximum": 1},
                    "input_psnr_db": {"type": "number", "maximum": PSNR_CAP},
                    "input_ssim": {"type": "number", "minimum": -1, "maximum": 1},
                },
            },
        },
        "mean": {
            "type": "object",
            "required": ["psnr_db", "ssim", "input_psnr_db", "input_ssim", "psnr_gain_db"],
            "additionalProperties": {"type": "number"},
        },
    },
}


@dataclass
class MetricReport:
    """Per-image and mean Y-channel PSNR/SSIM, with the degraded-input baseline."""

    names: list[str] = field(default_factory=list)
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    input_psnr_db: list[float] = field(default_factory=list)
    input_ssim: list[float] = field(default_factory=list)

    def add(self, name: str, restored, degraded, clean) -> None:
        y_out, y_in, y_gt = rgb_to_y(restored), rgb_to_y(degraded), rgb_to_y(clean)
        self.names.append(name)
        self.psnr_db.append(psnr(y_out, y_gt))
        self.ssim.append(ssim(y_out, y_gt))
        self.input_psnr_db.append(psnr(y_in, y_gt))
        self.input_ssim.append(ssim(y_in, y_gt))

    @staticmethod
    def _mean(xs) -> float:
        return float(np.mean(xs)) if xs else float("nan")

    @property
    def mean_psnr(self) -> float:
        return self._mean(self.psnr_db)

    @property
    def mean_input_psnr(self) -> float:
        return self._mean(self.input_psnr_db)

    def to_dict(self) -> dict:
        rows = [
            {"name": n, "psnr_db": p, "ssim": s, "input_psnr_db": ip, "input_ssim": iss}
            for n, p, s, ip, iss in zip(self.names, self.psnr_db, self.ssim,
                                         self.input_psnr_db, self.input_ssim)
        ]
        mean = {
            "psnr_db": self.mean_psnr,
            "ssim": self._mean(self.ssim),
            "input_psnr_db": self.mean_input_psnr,
            "input_ssim": self._mean(self.input_ssim),
            "psnr_gain_db": self.mean_psnr - self.mean_input_psnr,
        }
        return {"images": rows, "mean": mean}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        validate_report(d)
        rows = d["images"]
        return cls([r["name"] for r in rows], [r["psnr_db"] for r in rows], [r["ssim"] for r in rows],
                   [r["input_psnr_db"] for r in rows], [r["input_ssim"] for r in rows])

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        validate_report(d)
        jpath, cpath = out_dir / "metrics.json", out_dir / "metrics.csv"
        jpath.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "psnr_db", "ssim", "input_psnr_db", "input_ssim"])
            for r in d["images"]:
                w.writerow([r["name"], repr(r["psnr_db"]), repr(r["ssim"]),
                            repr(r["input_psnr_db"]), repr(r["input_ssim"])])
            m = d["mean"]
            w.writerow(["mean", repr(m["psnr_db"]), repr(m["ssim"]),
                        repr(m["input_psnr_db"]), repr(m["input_ssim"])])
        return jpath, cpath


def validate_report(d: dict) -> None:
    jsonschema.validate(d, REPORT_SCHEMA)
