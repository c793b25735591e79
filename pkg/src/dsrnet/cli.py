"""Command-line front end: train, eval, infer, degrade, counters, gradcheck, bench.

Configuration is a flat key=value file ('#' starts a comment) merged with
command-line overrides; every run that produces artifacts writes its fully
resolved configuration next to them.  All randomness flows from one seed,
fanned out to named sub-streams (init, sampler).

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import struct
import sys
import time

import numpy as np

from . import data as D
from . import metrics as M
from .layers import Tape, grad_check
from .model import (DsrNet, ModelConfig, VARIANTS, build, count_macs, count_params,
                    load_model, save_model)
from .optim import AdamState, adam_step, lr_at, mse_loss
from .tensor import DTYPES, Rng, Tensor, read_tensor_record, write_tensor_record

DATA_ROOT_ENV = "DSRNET_DATA_ROOT"

# named RNG sub-streams
STREAM_INIT = 0
STREAM_SAMPLER = 1

OPTIM_MAGIC = b"DSRO"


class ConfigError(Exception):
    pass


def load_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path) as fp:
            for lineno, raw in enumerate(fp, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return values


def write_config_file(values: dict, path) -> None:
    with open(path, "w") as fp:
        for key in sorted(values):
            fp.write(f"{key}={values[key]}\n")


def _resolve_path(path: str | None, data_root: str) -> str | None:
    if path is None:
        return None
    if os.path.isabs(path):
        return path
    return os.path.join(data_root, path)


def model_config_from(ns) -> ModelConfig:
    cfg = ModelConfig(
        scale=int(ns["scale"]),
        width=int(ns["width"]),
        gate_threshold=float(ns["gate_threshold"]),
        gate_hidden=int(ns["gate_hidden"]),
        variant=str(ns["variant"]),
        dtype=str(ns["dtype"]),
    )
    try:
        return cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# optimizer-state sidecar (model checkpoints stay params-only)
# ---------------------------------------------------------------------------


def save_optim_state(path, m: DsrNet, state: AdamState, step: int) -> None:
    with open(path, "wb") as fp:
        fp.write(OPTIM_MAGIC)
        fp.write(struct.pack("<QQ", step, state.t))
        for p in m.parameters():
            for arr in (p.adam_m_w, p.adam_v_w, p.adam_m_b, p.adam_v_b):
                write_tensor_record(fp, arr)


def load_optim_state(path, m: DsrNet, state: AdamState) -> int:
    with open(path, "rb") as fp:
        head = fp.read(len(OPTIM_MAGIC) + 16)
        if head[:4] != OPTIM_MAGIC:
            raise ValueError(f"{path}: not an optimizer state file")
        step, t = struct.unpack("<QQ", head[4:20])
        state.t = int(t)
        for p in m.parameters():
            for arr in (p.adam_m_w, p.adam_v_w, p.adam_m_b, p.adam_v_b):
                arr[...] = read_tensor_record(fp)
    return int(step)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

_MODEL_KEYS = ["scale", "width", "gate_threshold", "gate_hidden", "variant", "dtype"]


def cmd_train(ns: dict) -> int:
    outdir = ns["outdir"]
    os.makedirs(outdir, exist_ok=True)
    data_root = ns["data_root"]
    hr_dir = _resolve_path(ns["hr_dir"], data_root)
    lr_dir = _resolve_path(ns.get("lr_dir"), data_root)
    cfg = model_config_from(ns)
    steps = int(ns["steps"])
    batch = int(ns["batch"])
    patch = int(ns["patch"])
    seed = int(ns["seed"])
    initial_lr = float(ns["lr"])
    half_every = int(ns["half_every"])
    log_every = max(1, int(ns["log_every"]))
    ckpt_every = int(ns["ckpt_every"])

    write_config_file(ns, os.path.join(outdir, "resolved_config.txt"))
    pairs = D.make_pairs(hr_dir, cfg.scale, lr_dir=lr_dir)
    root = Rng(seed)

    start_step = 0
    state = AdamState(lr=initial_lr)
    if ns.get("resume"):
        m = load_model(ns["resume"])
        if m.config.to_dict() != cfg.to_dict():
            raise ConfigError(f"resume checkpoint config {m.config.to_dict()} != run config")
        opt_path = _optim_path(ns["resume"])
        if os.path.exists(opt_path):
            start_step = load_optim_state(opt_path, m, state)
        print(f"resumed from {ns['resume']} at step {start_step}")
    else:
        m = build(cfg, root.derive(STREAM_INIT))

    params = m.parameters()
    dt = DTYPES[cfg.dtype]
    log_path = os.path.join(outdir, "train_log.csv")
    fresh_log = not (start_step and os.path.exists(log_path) and os.path.getsize(log_path))
    log_fp = open(log_path, "w" if fresh_log else "a", newline="")
    logger = csv.writer(log_fp)
    if fresh_log:
        logger.writerow(["step", "lr", "loss", "routed_fraction"])

    def checkpoint(step: int) -> str:
        path = os.path.join(outdir, f"model_step{step:06d}.dsrn")
        save_model(m, path)
        save_optim_state(_optim_path(path), m, state, step)
        return path

    step = start_step
    try:
        for step in range(start_step, steps):
            # per-step sampler stream keeps resume exactly aligned
            srng = root.derive(STREAM_SAMPLER, step)
            lr_b, hr_b = D.sample_patches(pairs, patch, batch, srng, dtype=dt)
            tape = Tape()
            pred, gate = m.forward_with_gate(lr_b, tape)
            loss = mse_loss(pred, hr_b, tape)
            tape.backward(loss)
            state.lr = lr_at(step, initial_lr, half_every)
            adam_step(params, state)
            step += 1
            if step % log_every == 0 or step == steps:
                routed = gate.routed_fraction if gate is not None else 0.0
                logger.writerow([step, f"{state.lr:.8g}", f"{loss.item():.8g}", f"{routed:.4f}"])
                log_fp.flush()
                print(f"step {step}/{steps}  lr {state.lr:.3g}  loss {loss.item():.6g}  routed {routed:.2f}")
            if ckpt_every and step % ckpt_every == 0 and step != steps:
                checkpoint(step)
    except KeyboardInterrupt:
        path = checkpoint(step)
        log_fp.close()
        print(f"interrupted; checkpoint flushed to {path}")
        return 2
    final = checkpoint(steps)
    log_fp.close()
    print(f"final checkpoint: {final}")
    print(f"training log: {log_path}")
    return 0


def _optim_path(model_path: str) -> str:
    return os.path.splitext(model_path)[0] + ".opt"


def _upscaled_pair_metrics(report: M.EvalReport, name: str, method: str,
                           sr: D.Image, hr: D.Image, shave: int, ms: float = 0.0) -> None:
    report.add(name, method, M.psnr_y(sr, hr, shave), M.ssim_y(sr, hr, shave), ms)


def cmd_eval(ns: dict) -> int:
    outdir = ns["outdir"]
    os.makedirs(outdir, exist_ok=True)
    data_root = ns["data_root"]
    hr_dir = _resolve_path(ns["hr_dir"], data_root)
    lr_dir = _resolve_path(ns.get("lr_dir"), data_root)
    scale = int(ns["scale"])
    bicubic_only = str(ns.get("bicubic_only", "false")).lower() in ("1", "true", "yes")
    checkpoint = ns.get("checkpoint")
    if not bicubic_only and not checkpoint:
        raise ConfigError("eval needs checkpoint=... or bicubic_only=true")

    model = None
    if not bicubic_only:
        if not os.path.exists(checkpoint):
            raise ConfigError(f"checkpoint not found: {checkpoint}")
        model = load_model(checkpoint)
        if model.config.scale != scale:
            raise ConfigError(f"checkpoint scale {model.config.scale} != requested {scale}")

    shave = int(ns["shave"]) if ns.get("shave") not in (None, "") else scale
    pairs = D.make_pairs(hr_dir, scale, lr_dir=lr_dir)
    write_config_file(ns, os.path.join(outdir, "resolved_config.txt"))

    report = M.EvalReport(scale=scale, shave=shave)
    for pr in pairs:
        name = os.path.basename(pr.hr_path)
        up = D.bicubic_resize(pr.lr, pr.hr.width, pr.hr.height).quantized()
        _upscaled_pair_metrics(report, name, "bicubic", up, pr.hr, shave)
        if model is not None:
            x = D.image_to_tensor(pr.lr, dtype=DTYPES[model.config.dtype])
            t0 = time.perf_counter()
            out = model.forward(x)
            ms = (time.perf_counter() - t0) * 1e3
            sr = D.tensor_to_image(out).quantized()
            _upscaled_pair_metrics(report, name, "model", sr, pr.hr, shave, ms)

    csv_path = os.path.join(outdir, "eval_report.csv")
    report.to_csv(csv_path)
    table = report.format_table()
    with open(os.path.join(outdir, "eval_report.txt"), "w") as fp:
        fp.write(table + "\n")
    print(table)
    print(f"report written to {csv_path}")
    return 0


def cmd_infer(ns: dict) -> int:
    checkpoint = ns["checkpoint"]
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model = load_model(checkpoint)
    img = D.load_png(ns["input"])
    if img.channels != model.config.in_channels:
        raise ConfigError(f"input has {img.channels} channels, model expects {model.config.in_channels}")
    if img.width < 3 or img.height < 3:
        raise ConfigError(f"input too small: {img.width}x{img.height} (need >= 3x3)")
    x = D.image_to_tensor(img, dtype=DTYPES[model.config.dtype])
    out, gate = model.forward_with_gate(x)
    sr = D.tensor_to_image(out)
    D.save_png(sr, ns["output"])
    if gate is not None:
        branch = "selected+fixed" if gate.use_sdg[0] else "fixed only"
        print(f"gate: p2={gate.p2[0]:.4f} -> {branch}")
    print(f"wrote {sr.width}x{sr.height} image to {ns['output']}")
    write_config_file(ns, ns["output"] + ".cfg")
    return 0


def cmd_degrade(ns: dict) -> int:
    outdir = ns["outdir"]
    os.makedirs(outdir, exist_ok=True)
    hr_dir = _resolve_path(ns["hr_dir"], ns["data_root"])
    scale = int(ns["scale"])
    pairs = D.make_pairs(hr_dir, scale)
    out_pairs = []
    for pr in pairs:
        name = os.path.basename(pr.hr_path)
        stem, ext = os.path.splitext(name)
        lr_path = os.path.join(outdir, f"{stem}x{scale}{ext}")
        D.save_png(pr.lr, lr_path)
        out_pairs.append(D.ImagePair(pr.lr, pr.hr, scale, pr.hr_path, lr_path))
    manifest = os.path.join(outdir, "manifest.csv")
    D.write_manifest(out_pairs, manifest)
    write_config_file(ns, os.path.join(outdir, "resolved_config.txt"))
    print(f"wrote {len(out_pairs)} LR images and {manifest}")
    return 0


def cmd_count_params(ns: dict) -> int:
    cfg = model_config_from(ns)
    m = build(cfg, Rng(0).derive(STREAM_INIT))
    pc = count_params(m)
    print(f"variant={cfg.variant} scale={cfg.scale} width={cfg.width}")
    for name, val in pc.by_block.items():
        print(f"  {name:>4s}: {val:>10,d}")
    print(f"total:            {pc.total:>10,d}")
    print(f"total w/o sdg:    {pc.total_without_sdg:>10,d}")
    return 0


def cmd_count_flops(ns: dict) -> int:
    cfg = model_config_from(ns)
    m = build(cfg, Rng(0).derive(STREAM_INIT))
    h, w = int(ns["lr_h"]), int(ns["lr_w"])
    mc = count_macs(m, h, w)
    print(f"variant={cfg.variant} scale={cfg.scale} width={cfg.width} lr_input={w}x{h}")
    for name, val in mc.by_block.items():
        print(f"  {name:>4s}: {val:>16,d} MACs")
    print(f"routed total:  {mc.routed:>16,d} MACs ({mc.routed/1e9:.2f}G)")
    print(f"skipped total: {mc.skipped:>16,d} MACs ({mc.skipped/1e9:.2f}G)")
    return 0


def cmd_gradcheck(ns: dict) -> int:
    seed = int(ns["seed"])
    tol = float(ns["tolerance"])
    cfg = ModelConfig(
        scale=int(ns["scale"]), width=int(ns["width"]),
        gate_hidden=max(1, int(ns["width"]) // 4),
        variant=str(ns["variant"]), dtype="f64",
    ).validate()
    m = build(cfg, Rng(seed).derive(STREAM_INIT))
    rng = np.random.default_rng(seed + 1)
    for p in m.parameters():
        p.bias.data[...] = rng.uniform(0.02, 0.1, size=p.bias.shape)
    x = Tensor(rng.random((1, 3, 8, 8)))
    out = m.forward(x)
    target = Tensor(out.data + 0.05 * rng.standard_normal(out.shape))

    def f(tape):
        return mse_loss(m.forward(x, tape), target, tape)

    err = grad_check(f, m.parameters(), eps=float(ns["eps"]))
    print(f"gradcheck: max relative error {err:.3e} over "
          f"{sum(p.num_params() for p in m.parameters())} elements (tolerance {tol:g})")
    return 0 if err < tol else 2


def cmd_bench(ns: dict) -> int:
    cfg = model_config_from(ns)
    m = build(cfg, Rng(int(ns["seed"])).derive(STREAM_INIT))
    sizes = [int(s) for s in str(ns["sizes"]).split(",")]
    runs = int(ns["runs"])
    print(f"{'size':>6s}  {'median_ms':>10s}  {'mean_ms':>10s}")
    for size in sizes:
        r = M.time_inference(m, size, runs=runs)
        print(f"{size:>6d}  {r.median_ms:>10.2f}  {r.mean_ms:>10.2f}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_model_flags(sp, scale_required=False):
    sp.add_argument("--scale", type=int, default=None)
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--gate-threshold", dest="gate_threshold", type=float, default=None)
    sp.add_argument("--gate-hidden", dest="gate_hidden", type=int, default=None)
    sp.add_argument("--variant", choices=VARIANTS, default=None)
    sp.add_argument("--dtype", choices=("f32", "f64"), default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="dsrnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--data-root", dest="data_root", default=None,
                        help=f"base dir for relative data paths (default ${DATA_ROOT_ENV} or '.')")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    _add_model_flags(sp)
    sp.add_argument("--hr-dir", dest="hr_dir", default=None)
    sp.add_argument("--lr-dir", dest="lr_dir", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--patch", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--half-every", dest="half_every", type=int, default=None)
    sp.add_argument("--log-every", dest="log_every", type=int, default=None)
    sp.add_argument("--ckpt-every", dest="ckpt_every", type=int, default=None)
    sp.add_argument("--resume", default=None)
    sp.add_argument("--outdir", default=None)

    sp = sub.add_parser("eval", help="evaluate a checkpoint plus the bicubic baseline")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--hr-dir", dest="hr_dir", default=None)
    sp.add_argument("--lr-dir", dest="lr_dir", default=None)
    sp.add_argument("--scale", type=int, default=None)
    sp.add_argument("--shave", type=int, default=None)
    sp.add_argument("--bicubic-only", dest="bicubic_only", default=None)
    sp.add_argument("--outdir", default=None)

    sp = sub.add_parser("infer", help="upscale one image")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--input", default=None)
    sp.add_argument("--output", default=None)

    sp = sub.add_parser("degrade", help="generate bicubic LR images + manifest")
    common(sp)
    sp.add_argument("--hr-dir", dest="hr_dir", default=None)
    sp.add_argument("--scale", type=int, default=None)
    sp.add_argument("--outdir", default=None)

    sp = sub.add_parser("count-params", help="print parameter counts")
    common(sp)
    _add_model_flags(sp)

    sp = sub.add_parser("count-flops", help="print MAC counts")
    common(sp)
    _add_model_flags(sp)
    sp.add_argument("--lr-h", dest="lr_h", type=int, default=None)
    sp.add_argument("--lr-w", dest="lr_w", type=int, default=None)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    common(sp)
    sp.add_argument("--scale", type=int, default=None)
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--variant", choices=VARIANTS, default=None)
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--tolerance", type=float, default=None)

    sp = sub.add_parser("bench", help="inference timing table")
    common(sp)
    _add_model_flags(sp)
    sp.add_argument("--sizes", default=None, help="comma-separated LR sizes")
    sp.add_argument("--runs", type=int, default=None)

    return parser


_DEFAULTS = {
    "train": {
        "hr_dir": None, "lr_dir": None, "scale": 2, "width": 64,
        "gate_threshold": 0.75, "gate_hidden": 16, "variant": "full", "dtype": "f32",
        "steps": 600_000, "batch": 64, "patch": 64, "lr": 1e-4, "half_every": 400_000,
        "log_every": 100, "ckpt_every": 10_000, "seed": 0, "resume": None,
        "outdir": "runs/train",
    },
    "eval": {
        "checkpoint": None, "hr_dir": None, "lr_dir": None, "scale": 2, "shave": None,
        "bicubic_only": "false", "seed": 0, "outdir": "runs/eval",
    },
    "infer": {"checkpoint": None, "input": None, "output": "out.png", "seed": 0},
    "degrade": {"hr_dir": None, "scale": 2, "seed": 0, "outdir": "runs/lr"},
    "count-params": {
        "scale": 4, "width": 64, "gate_threshold": 0.75, "gate_hidden": 16,
        "variant": "full", "dtype": "f32", "seed": 0,
    },
    "count-flops": {
        "scale": 4, "width": 64, "gate_threshold": 0.75, "gate_hidden": 16,
        "variant": "full", "dtype": "f32", "lr_h": 256, "lr_w": 256, "seed": 0,
    },
    "gradcheck": {
        "scale": 2, "width": 8, "variant": "full", "eps": 1e-5, "tolerance": 1e-4, "seed": 58,
    },
    "bench": {
        "scale": 4, "width": 64, "gate_threshold": 0.75, "gate_hidden": 16,
        "variant": "full", "dtype": "f32", "sizes": "256,512", "runs": 10, "seed": 0,
    },
}

_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "degrade": cmd_degrade,
    "count-params": cmd_count_params,
    "count-flops": cmd_count_flops,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}

_REQUIRED = {
    "train": ["hr_dir"],
    "eval": ["hr_dir"],
    "infer": ["checkpoint", "input"],
    "degrade": ["hr_dir"],
}


def resolve(args: argparse.Namespace) -> dict:
    defaults = dict(_DEFAULTS[args.command])
    keys = list(defaults.keys()) + ["data_root"]
    file_vals = load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_vals) - set(keys)
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    ns = dict(defaults)
    ns["data_root"] = os.environ.get(DATA_ROOT_ENV, ".")
    ns.update(file_vals)
    for key in keys:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            ns[key] = cli_val
    for key in _REQUIRED.get(args.command, []):
        if not ns.get(key):
            raise ConfigError(f"{args.command}: missing required setting {key!r}")
    return ns


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        ns = resolve(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](ns)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
