"""Adam training with a triangular cyclic learning rate, and test-set evaluation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, DomainError
from .metrics import MetricReport
from .model import Deraformer, LossBreakdown, LossWeights, ModelConfig, total_loss

LOG_COLUMNS = ("step", "lr", "total_loss", "psnr_term", "edge_term", "udl_term")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    crop: int = 64
    base_lr: float = 3e-4
    peak_lr: float = 3.6e-4
    cycle_steps: int = 0  # 0 -> steps // 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_psnr: float = 1.0
    loss_edge: float = 0.2
    loss_udl: float = 1.0
    flip: bool = True
    rotate: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.crop < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and crop >= 1 required")
        if self.base_lr < 0 or self.peak_lr < self.base_lr:
            raise ConfigError("need 0 <= base_lr <= peak_lr")

    @property
    def period(self) -> int:
        return self.cycle_steps or max(1, self.steps // 4)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.loss_psnr, self.loss_edge, self.loss_udl)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def cyclic_lr(step: int, tcfg: TrainConfig) -> float:
    """Triangular cycle: base at the start of each period, peak at its middle."""
    frac = (step % tcfg.period) / tcfg.period
    return tcfg.base_lr + (tcfg.peak_lr - tcfg.base_lr) * (1.0 - abs(2.0 * frac - 1.0))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_update(params, state: AdamState, lr: float, tcfg: TrainConfig) -> None:
    state.t += 1
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + tcfg.eps)


class NonFiniteLoss(DomainError):
    """Raised when a loss term stops being finite; ``term`` and ``stage`` locate it."""

    def __init__(self, term: str, stage: int | None, value: float, step: int):
        where = f"{term}" + (f" (stage {stage})" if stage is not None else "")
        super().__init__(f"non-finite loss at step {step}: {where} = {value}")
        self.term, self.stage, self.value, self.step = term, stage, value, step


def _check_finite(lb: LossBreakdown, step: int) -> None:
    for term, value in (("psnr_term", lb.psnr_term), ("edge_term", lb.edge_term)):
        if not math.isfinite(value):
            raise NonFiniteLoss(term, None, value, step)
    for i, value in enumerate(lb.udl_stages):
        if not math.isfinite(value):
            raise NonFiniteLoss("udl_term", i, value, step)
    if not math.isfinite(lb.total.item()):
        raise NonFiniteLoss("total_loss", None, lb.total.item(), step)


def train_step(model: Deraformer, batch, state: AdamState, tcfg: TrainConfig,
               step: int) -> tuple[LossBreakdown, float]:
    """Forward, loss, backward and one Adam update; returns the loss breakdown and lr used."""
    rain, clean = batch
    params = model.parameters()
    out = model(rain)
    lb = total_loss(out, clean, tcfg.weights, model=model)
    _check_finite(lb, step)
    model.zero_grad()
    T.backward(lb.total)
    lr = cyclic_lr(step, tcfg)
    adam_update(params, state, lr, tcfg)
    return lb, lr


def augment_pair(rain: np.ndarray, clean: np.ndarray, rng: np.random.Generator,
                 tcfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Random crop, horizontal flip and 90-degree rotation applied identically to both."""
    h, w = rain.shape[-2:]
    c = tcfg.crop
    if h < c or w < c:
        raise ConfigError(f"crop {c} exceeds image size {h}x{w}")
    y, x = int(rng.integers(0, h - c + 1)), int(rng.integers(0, w - c + 1))
    r, g = rain[:, y:y + c, x:x + c], clean[:, y:y + c, x:x + c]
    if tcfg.flip and rng.random() < 0.5:
        r, g = r[:, :, ::-1], g[:, :, ::-1]
    if tcfg.rotate and rng.random() < 0.5:
        r, g = np.rot90(r, 1, axes=(1, 2)), np.rot90(g, 1, axes=(1, 2))
    return np.ascontiguousarray(r), np.ascontiguousarray(g)


def sample_batch(rain: np.ndarray, clean: np.ndarray, rng: np.random.Generator,
                 tcfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.integers(0, len(rain), size=tcfg.batch_size)
    pairs = [augment_pair(rain[i], clean[i], rng, tcfg) for i in idx]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


@dataclass
class TrainResult:
    model: Deraformer
    log_path: Path | None
    checkpoint_path: Path | None
    rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def train(model_cfg: ModelConfig, tcfg: TrainConfig, rain: np.ndarray, clean: np.ndarray,
          out_dir=None, progress=None) -> TrainResult:
    """Train from scratch; writes ``train_log.csv`` and ``checkpoint.bin`` under ``out_dir``.

    The model is initialized from ``tcfg.seed`` and batches come from an
    independent stream of the same seed, so a run is a pure function of its inputs.
    """
    if len(rain) == 0:
        raise ConfigError("training set is empty")
    model = Deraformer(replace(model_cfg, init_seed=tcfg.seed))
    data_rng = np.random.default_rng([tcfg.seed, 1])
    state = AdamState.zeros(model.parameters())
    out = Path(out_dir) if out_dir is not None else None
    log_path = ckpt = None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    rows = []
    start = time.perf_counter()
    try:
        for step in range(tcfg.steps):
            batch = sample_batch(rain, clean, data_rng, tcfg)
            lb, lr = train_step(model, batch, state, tcfg, step)
            row = {"step": step, "lr": lr, "total_loss": lb.total.item(), "psnr_term": lb.psnr_term,
                   "edge_term": lb.edge_term, "udl_term": lb.udl_term}
            rows.append(row)
            if writer is not None:
                writer.writerow([step] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
            if out is not None and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                checkpoint.save(model, out / f"checkpoint_{step + 1:06d}.bin")
            if progress is not None:
                progress(step, row)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        ckpt = checkpoint.save(model, out / "checkpoint.bin")
    return TrainResult(model, log_path, ckpt, rows, time.perf_counter() - start)


def restore(model: Deraformer, image: np.ndarray) -> np.ndarray:
    """Derained [3, H, W] image clamped to [0, 1]."""
    return np.clip(model(image).final.data, 0.0, 1.0)


def evaluate(model: Deraformer, names, rain: np.ndarray, clean: np.ndarray) -> MetricReport:
    report = MetricReport()
    for name, r, c in zip(names, rain, clean):
        report.add(name, restore(model, r), r, c)
    return report
