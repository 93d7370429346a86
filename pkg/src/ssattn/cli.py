"""Command-line entry point: ``ssattn gen-data|train|eval|gradcheck|visualize``.

Parameters come from an optional JSON config, then ``key=value`` overrides,
then explicit flags (flags win).  Every run writes ``resolved_config.json``
to its output directory; passing that file back via ``--config`` replays it.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck, raingen
from .errors import ConfigError, SsattnError
from .model import ModelConfig
from .train import NonFiniteLoss, TrainConfig, evaluate, train
from .visualize import visualize

ABLATIONS = {
    "no-ud": {"ssa_mode": "none"},
    "ssa-no-ud": {"ssa_mode": "none"},
    "no-rs": {"ssa_mode": "direct"},
    "ssa-no-rs": {"ssa_mode": "direct"},
    "lr-no-ud": {"lr_mode": "none"},
    "lr-no-rs": {"lr_mode": "direct"},
}
ALIASES = {"attn": "mixer"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"init_seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
GEN_KEYS = {f.name for f in fields(raingen.GenConfig)} - {"seed"}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = ALIASES.get(key.strip(), key.strip())
        out[key] = parse_value(value)
    return out


def parse_sweep(spec: str) -> tuple[str, list[float]]:
    """``beta=0.2:1.0:5`` -> ("beta", [0.2, 0.4, 0.6, 0.8, 1.0])."""
    try:
        key, rng = spec.split("=", 1)
        lo, hi, n = rng.split(":")
        values = np.linspace(float(lo), float(hi), int(n))
    except ValueError as exc:
        raise ConfigError(f"bad sweep {spec!r}; expected key=lo:hi:count") from exc
    return ALIASES.get(key, key), [float(round(v, 12)) for v in values]


def resolve(args, flag_keys) -> dict:
    """Merge config file, overrides and flags; resolve the seed."""
    params = {}
    if args.config:
        params.update(json.loads(Path(args.config).read_text()))
    params.update(parse_overrides(args.overrides))
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    if args.seed is not None:
        params["seed"] = args.seed
    elif "seed" not in params:
        params["seed"] = int(os.environ.get("SSATTN_SEED", "0"))
    if args.out is not None:
        params["out"] = args.out
    params["command"] = args.command
    return params


def write_resolved(params: dict) -> Path:
    out = Path(params["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    return path


def _require(params: dict, *keys) -> None:
    missing = [k for k in keys if params.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required parameter(s): {', '.join(missing)}")


def _pick(params: dict, keys) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in params.items() if k in keys}


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_data(params: dict) -> int:
    _require(params, "out")
    count = int(params.get("count", 0))
    cfg = raingen.GenConfig(seed=int(params["seed"]), **_pick(params, GEN_KEYS))
    write_resolved(params)
    d = raingen.write_dataset(params["out"], cfg, count)
    print(f"wrote {count} pairs to {d}")
    return 0


def model_config(params: dict) -> ModelConfig:
    base = _pick(params, MODEL_KEYS)
    for name in params.get("ablate") or []:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        base.update(ABLATIONS[name])
    return ModelConfig(**base)


def _train_once(params: dict, out: Path) -> dict:
    mcfg = model_config(params)
    tcfg = TrainConfig(seed=int(params["seed"]), **_pick(params, TRAIN_KEYS))
    _, rain, clean = raingen.load_pairs(params["data"])
    every = max(1, tcfg.steps // 10)

    def progress(step, row):
        if step % every == 0 or step == tcfg.steps - 1:
            print(f"step {step:6d}  lr {row['lr']:.3e}  loss {row['total_loss']:.4f}", flush=True)

    try:
        res = train(mcfg, tcfg, rain, clean, out, progress)
    except NonFiniteLoss as exc:
        diag = {"error": str(exc), "term": exc.term, "stage": exc.stage, "step": exc.step,
                "value": repr(exc.value)}
        (out / "diagnostics.json").write_text(json.dumps(diag, indent=2) + "\n")
        raise
    summary = {"steps": tcfg.steps, "seconds": res.seconds,
               "final_loss": res.rows[-1]["total_loss"] if res.rows else None}
    if params.get("test"):
        names, trn, tcl = raingen.load_pairs(params["test"])
        report = evaluate(res.model, names, trn, tcl)
        report.write(out)
        summary.update(psnr_db=report.mean_psnr, input_psnr_db=report.mean_input_psnr)
        print(f"test PSNR {report.mean_psnr:.3f} dB (input {report.mean_input_psnr:.3f} dB)")
    return summary


def cmd_train(params: dict) -> int:
    _require(params, "out", "data")
    write_resolved(params)
    out = Path(params["out"])
    sweep = params.get("sweep")
    if not sweep:
        _train_once(params, out)
        return 0
    key, values = parse_sweep(sweep)
    if key not in MODEL_KEYS | TRAIN_KEYS:
        raise ConfigError(f"cannot sweep unknown key {key!r}")
    rows = []
    for v in values:
        run = dict(params, **{key: v})
        run.pop("sweep")
        sub = out / f"{key}_{v:g}"
        sub.mkdir(parents=True, exist_ok=True)
        print(f"-- {key}={v:g}")
        rows.append({key: v, **_train_once(run, sub)})
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return 0


def cmd_eval(params: dict) -> int:
    _require(params, "out", "checkpoint", "data")
    model = checkpoint.load(params["checkpoint"])
    write_resolved(params)
    names, rain, clean = raingen.load_pairs(params["data"])
    report = evaluate(model, names, rain, clean)
    report.write(params["out"])
    d = report.to_dict()["mean"]
    print(f"PSNR {d['psnr_db']:.3f} dB  SSIM {d['ssim']:.4f}  "
          f"(input {d['input_psnr_db']:.3f} dB / {d['input_ssim']:.4f})")
    return 0


def cmd_gradcheck(params: dict) -> int:
    if params.get("out"):
        write_resolved(params)
    ops = params.get("op") or None
    results = gradcheck.run_suite(ops, seed=int(params["seed"]),
                                  tolerance=float(params.get("tolerance", gradcheck.TOLERANCE)))
    table = gradcheck.format_table(results)
    print(table)
    if params.get("out"):
        (Path(params["out"]) / "gradcheck.txt").write_text(table + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_visualize(params: dict) -> int:
    _require(params, "out", "checkpoint", "image")
    model = checkpoint.load(params["checkpoint"])
    write_resolved(params)
    image = raingen.load_png(params["image"])
    res = visualize(model, image, params["out"], window=int(params.get("window", 0)),
                    level=int(params.get("level", 0)), zoom=int(params.get("zoom", 4)))
    for p in res.paths:
        print(p)
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, ("mode", "count")),
    "train": (cmd_train, ("data", "test", "ablate", "sweep")),
    "eval": (cmd_eval, ("checkpoint", "data")),
    "gradcheck": (cmd_gradcheck, ("op",)),
    "visualize": (cmd_visualize, ("checkpoint", "image", "window", "level")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of parameters")
        p.add_argument("--seed", type=int, help="overrides config; falls back to $SSATTN_SEED")
        p.add_argument("--out", help="output directory")
        p.add_argument("overrides", nargs="*", metavar="key=value")
        return p

    g = common(sub.add_parser("gen-data", help="write a synthetic paired dataset"))
    g.add_argument("--mode", type=str.upper, choices=raingen.MODES)
    g.add_argument("--count", type=int)

    t = common(sub.add_parser("train", help="train a model and log the loss terms"))
    t.add_argument("--data", help="training dataset directory")
    t.add_argument("--test", help="optional test dataset evaluated after training")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    t.add_argument("--sweep", help="grid over one key, e.g. beta=0.2:1.0:5")

    e = common(sub.add_parser("eval", help="Y-channel PSNR/SSIM of a checkpoint on a dataset"))
    e.add_argument("--checkpoint")
    e.add_argument("--data")

    c = common(sub.add_parser("gradcheck", help="finite-difference check of every primitive"))
    c.add_argument("--op", action="append", help="restrict to this op (repeatable)")

    v = common(sub.add_parser("visualize", help="render sampling points and uncertainty maps"))
    v.add_argument("--checkpoint")
    v.add_argument("--image", help="input PNG")
    v.add_argument("--window", type=int)
    v.add_argument("--level", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, flag_keys = COMMANDS[args.command]
    try:
        return fn(resolve(args, flag_keys))
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SsattnError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
