"""Command-line entry point: one binary wiring every module.

Each run creates runs/<timestamp>-<subcommand>/ (root overridable by
--out-dir or the DITLAB_RUNS environment variable) and finishes by writing
manifest.json describing the resolved configuration, the seeds, and every
artifact produced.  Numeric settings may come from a JSON config file; any
flag given explicitly wins over the file, which wins over built-in
defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from ditlab import __version__
from ditlab.analysis import (
    ConformanceRow,
    conformance_table,
    count_flops,
    count_params,
)
from ditlab.diffcore import save_tensors, stratified_coords, grad_check
from ditlab.errors import ConfigError, ShapeError
from ditlab.model import BlockVariant, init_parameters, mini_config, resolve_config
from ditlab.sampler import SampleRequest, sample, write_ppm
from ditlab.schedule import hybrid_loss, linear_schedule, q_sample, respace, write_schedule_csv
from ditlab.sweep import (
    EvalProtocol,
    SweepEntry,
    model_name,
    scaling_sweep,
    write_sweep_csv,
)
from ditlab.trainer import ToyLatents, TrainConfig, load_checkpoint, train
from ditlab.model.network import forward

VARIANT_CHOICES = [v.value for v in BlockVariant]


# -- run directories and manifests --------------------------------------------


def _output_root(args) -> Path:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    return Path(os.environ.get("DITLAB_RUNS", "runs"))


def _make_run_dir(args, subcommand: str) -> Path:
    root = _output_root(args)
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = root / f"{stamp}-{subcommand}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = root / f"{stamp}-{subcommand}-{suffix}"
    run_dir.mkdir(parents=True)
    return run_dir


def _write_manifest(
    run_dir: Path,
    subcommand: str,
    config: dict,
    seeds: dict,
    artifacts: list,
    started: float,
) -> Path:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "artifacts": [str(p) for p in artifacts],
        "version": __version__,
        "wall_clock_seconds": round(time.monotonic() - started, 3),
    }
    path = run_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_file_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _resolve_settings(defaults: dict, file_config: dict, args) -> dict:
    """defaults <- file <- explicit flags; unknown file keys are an error."""
    unknown = set(file_config) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown config keys {sorted(unknown)}; valid keys: "
            f"{sorted(defaults)}"
        )
    out = dict(defaults)
    out.update(file_config)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _model_config(settings: dict):
    """Build the model config from resolved settings (shared by subcommands)."""
    config = resolve_config(settings["model"])
    replacements = {}
    if settings.get("image_size") is not None:
        if settings.get("latent_size") is not None:
            raise ConfigError("give either image_size or latent_size, not both")
        image = settings["image_size"]
        if image % 8 != 0:
            raise ConfigError(f"image_size must be a multiple of 8, got {image}")
        replacements["input_size"] = image // 8
    elif settings.get("latent_size") is not None:
        replacements["input_size"] = settings["latent_size"]
    if settings.get("channels") is not None:
        replacements["channels"] = settings["channels"]
    if settings.get("classes") is not None:
        replacements["num_classes"] = settings["classes"]
    if settings.get("variant") is not None:
        replacements["variant"] = BlockVariant(settings["variant"])
    if replacements:
        config = dataclasses.replace(config, **replacements)
    return config


# -- train ---------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "model": "mini",
    "variant": None,
    "image_size": None,
    "latent_size": None,
    "channels": None,
    "classes": None,
    "steps": 200,
    "batch_size": 32,
    "learning_rate": 1e-4,
    "weight_decay": 0.0,
    "ema_decay": 0.9999,
    "checkpoint_every": 500,
    "seed": 0,
    "data_seed": 0,
}


def cmd_train(args) -> int:
    started = time.monotonic()
    settings = _resolve_settings(TRAIN_DEFAULTS, _load_file_config(args.config), args)
    config = _model_config(settings)
    train_config = TrainConfig(
        steps=settings["steps"],
        batch_size=settings["batch_size"],
        learning_rate=settings["learning_rate"],
        weight_decay=settings["weight_decay"],
        ema_decay=settings["ema_decay"],
        checkpoint_every=settings["checkpoint_every"],
        seed=settings["seed"],
    )
    dataset = ToyLatents(
        config.num_classes, config.input_size, config.channels,
        seed=settings["data_seed"],
    )
    run_dir = _make_run_dir(args, "train")
    train(config, train_config, dataset, out_dir=run_dir, resume=args.resume)

    artifacts = [run_dir / "loss.csv"]
    artifacts += sorted((run_dir / "checkpoints").glob("*.ntc"))
    missing = [p for p in artifacts if not p.exists()]
    if missing:
        print(f"error: missing artifacts: {missing}", file=sys.stderr)
        return 1
    _write_manifest(
        run_dir,
        "train",
        config={
            "model": config.to_dict(),
            "train": dataclasses.asdict(train_config),
        },
        seeds={"train": train_config.seed, "data": settings["data_seed"]},
        artifacts=artifacts,
        started=started,
    )
    print(f"trained {settings['steps']} steps -> {run_dir}")
    return 0


# -- sample ----------------------------------------------------------------------


def cmd_sample(args) -> int:
    started = time.monotonic()
    state, config, _, meta = load_checkpoint(args.ckpt)
    block = meta.get("schedule") or {}
    schedule = linear_schedule(
        t_max=int(block.get("t_max", 1000)),
        beta_start=float(block.get("beta_start", 1e-4)),
        beta_end=float(block.get("beta_end", 2e-2)),
    )
    params = state.params if args.raw_weights else state.ema_store()
    request = SampleRequest(
        count=args.count,
        labels=args.class_label,
        guidance_scale=args.cfg_scale,
        num_steps=args.steps,
        seed=args.seed,
        clamp_x0=args.clamp_x0,
    )
    result = sample(params, config, schedule, request)

    run_dir = Path(args.out) if args.out else _make_run_dir(args, "sample")
    run_dir.mkdir(parents=True, exist_ok=True)
    tensors = {"samples": result.samples}
    if result.labels is not None:
        tensors["labels"] = result.labels
    sample_meta = {
        "checkpoint": str(args.ckpt),
        "train_step": state.step,
        "guidance_scale": args.cfg_scale,
        "num_steps": args.steps,
        "seed": args.seed,
        "model_evals_per_image": result.model_evals_per_image,
        "weights": "raw" if args.raw_weights else "ema",
    }
    artifacts = [run_dir / "samples.ntc"]
    save_tensors(artifacts[0], tensors, sample_meta)
    for i in range(min(args.previews, args.count)):
        path = run_dir / f"sample-{i:03d}.ppm"
        write_ppm(path, result.samples[i])
        artifacts.append(path)
    _write_manifest(
        run_dir,
        "sample",
        config={"model": config.to_dict(), **sample_meta},
        seeds={"sample": args.seed},
        artifacts=artifacts,
        started=started,
    )
    print(
        f"wrote {args.count} samples ({result.model_evals_per_image} model "
        f"evals per image) -> {run_dir}"
    )
    return 0


# -- flops -----------------------------------------------------------------------

FLOPS_DEFAULTS = {
    "model": "XL/2",
    "variant": None,
    "image_size": None,
    "latent_size": None,
    "channels": None,
    "classes": None,
}


def cmd_flops(args) -> int:
    started = time.monotonic()
    settings = _resolve_settings(FLOPS_DEFAULTS, _load_file_config(args.config), args)
    if settings["image_size"] is None and settings["latent_size"] is None:
        settings["image_size"] = 256
    config = _model_config(settings)
    flops = count_flops(config)
    params = count_params(config)

    lines = [
        f"model {model_name(config)} variant={config.variant.value} "
        f"latent {config.input_size}x{config.input_size}x{config.channels} "
        f"tokens={config.tokens}",
        "",
        "flops per forward pass (multiply-accumulate = 1 flop):",
    ]
    for field in dataclasses.fields(flops):
        lines.append(f"  {field.name:18s} {getattr(flops, field.name):>18,}")
    lines += [
        f"  {'per block':18s} {flops.per_block:>18,}",
        f"  {'transformer core':18s} {flops.transformer_core:>18,}",
        f"  {'total':18s} {flops.total:>18,}",
        f"  {'Gflops':18s} {flops.gflops:>18.2f}",
        "",
        f"parameters: {params.total:,} ({params.millions:.1f}M)",
    ]
    text = "\n".join(lines)
    print(text)

    run_dir = _make_run_dir(args, "flops")
    report = run_dir / "flops.json"
    with open(report, "w") as fh:
        json.dump(
            {
                "model": config.to_dict(),
                "flops": {
                    f.name: getattr(flops, f.name) for f in dataclasses.fields(flops)
                },
                "total_flops": flops.total,
                "gflops": flops.gflops,
                "parameters": params.total,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    (run_dir / "flops.txt").write_text(text + "\n")
    _write_manifest(
        run_dir,
        "flops",
        config={"model": config.to_dict()},
        seeds={},
        artifacts=[report, run_dir / "flops.txt"],
        started=started,
    )
    return 0


# -- conformance -------------------------------------------------------------------


def _format_row(row: ConformanceRow) -> str:
    verdict = "PASS" if row.ok else "FAIL"
    return (
        f"{verdict}  {row.label:24s} {row.quantity:8s} "
        f"computed {row.computed:>14.4f}  published {row.published:>10.2f}  "
        f"rel err {row.rel_err:6.2%} (tol {row.tolerance:.0%})"
    )


def cmd_conformance(args) -> int:
    started = time.monotonic()
    rows = conformance_table()
    for row in rows:
        print(_format_row(row))
    failures = [row for row in rows if not row.ok]
    print(f"{len(rows) - len(failures)}/{len(rows)} rows pass")

    run_dir = _make_run_dir(args, "conformance")
    report = run_dir / "conformance.csv"
    with open(report, "w") as fh:
        fh.write("label,quantity,computed,published,tolerance,rel_err,ok\n")
        for row in rows:
            fh.write(
                f"{row.label},{row.quantity},{row.computed!r},"
                f"{row.published!r},{row.tolerance!r},{row.rel_err!r},{row.ok}\n"
            )
    _write_manifest(
        run_dir,
        "conformance",
        config={"rows": len(rows)},
        seeds={},
        artifacts=[report],
        started=started,
    )
    return 0 if not failures else 1


# -- gradcheck ---------------------------------------------------------------------


def _gradcheck_error(variant: BlockVariant, per_tensor: int, seed: int) -> float:
    """Max relative FD error through forward + hybrid loss on the mini model."""
    config = dataclasses.replace(mini_config(), variant=variant)
    params = init_parameters(config, seed=seed, dtype=np.float64)
    gen = np.random.default_rng(seed + 1)
    for tensor in params.tensors():
        tensor.data[...] = gen.standard_normal(tensor.shape) * 0.05
    schedule = linear_schedule()
    x0 = gen.standard_normal((2, 8, 8, 2))
    # mid-schedule timesteps: the early-t KL divides by a near-zero posterior
    # variance, and that curvature turns central differences into truncation
    # noise long before the tape is at fault
    t = np.array([250, 700])
    labels = np.array([1, 2])
    eps = gen.standard_normal(x0.shape)
    xt = q_sample(schedule, x0, t, eps).numpy()

    def fn(_):
        eps_hat, v = forward(xt, t, labels, params, config)
        # detach_mean=False: the difference quotient sees the value's full
        # dependence on eps_hat, so the graph must keep the same path
        loss, _ = hybrid_loss(schedule, eps_hat, v, eps, x0, xt, t, detach_mean=False)
        return loss

    coords = stratified_coords(params.tensors(), per_tensor=per_tensor, seed=seed)
    # the loss's exp/log terms make difference quotients noisier than on the
    # raw forward pass (~1e-10 absolute), so coordinates with gradients below
    # 1e-5 are judged on an absolute scale
    return grad_check(fn, params.tensors(), coords=coords, floor=1e-5)


def cmd_gradcheck(args) -> int:
    started = time.monotonic()
    if args.variant == "all":
        variants = list(BlockVariant)
    else:
        variants = [BlockVariant(args.variant)]
    results = []
    worst = 0.0
    for variant in variants:
        err = _gradcheck_error(variant, args.per_tensor, args.seed)
        worst = max(worst, err)
        verdict = "PASS" if err < args.tolerance else "FAIL"
        print(f"{verdict}  {variant.value:16s} max rel err {err:.3e}")
        results.append({"variant": variant.value, "max_rel_err": err})

    run_dir = _make_run_dir(args, "gradcheck")
    report = run_dir / "gradcheck.json"
    with open(report, "w") as fh:
        json.dump(
            {"tolerance": args.tolerance, "results": results}, fh, indent=2
        )
        fh.write("\n")
    _write_manifest(
        run_dir,
        "gradcheck",
        config={"per_tensor": args.per_tensor, "tolerance": args.tolerance},
        seeds={"gradcheck": args.seed},
        artifacts=[report],
        started=started,
    )
    return 0 if worst < args.tolerance else 1


# -- schedule ----------------------------------------------------------------------


def cmd_schedule(args) -> int:
    started = time.monotonic()
    schedule = linear_schedule(args.t_max, args.beta_start, args.beta_end)
    if args.steps is not None:
        schedule = respace(schedule, args.steps)
    run_dir = _make_run_dir(args, "schedule")
    path = run_dir / "schedule.csv"
    with open(path, "w", newline="") as fh:
        write_schedule_csv(schedule, fh)
    _write_manifest(
        run_dir,
        "schedule",
        config={
            "t_max": args.t_max,
            "beta_start": args.beta_start,
            "beta_end": args.beta_end,
            "steps": args.steps,
        },
        seeds={},
        artifacts=[path],
        started=started,
    )
    print(f"wrote {schedule.t_max}-step schedule -> {path}")
    return 0


# -- sweep -------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    started = time.monotonic()
    entries = []
    for ckpt in args.ckpt or []:
        _, config, _, _ = load_checkpoint(ckpt)
        entries.append(SweepEntry(config, Path(ckpt)))
    for name in (args.grid.split(",") if args.grid else []):
        entries.append(SweepEntry(resolve_config(name.strip()), None))
    if not entries:
        raise ConfigError("nothing to sweep: give --ckpt and/or --grid")

    shapes = {
        (e.config.input_size, e.config.channels, e.config.num_classes)
        for e in entries
    }
    if len(shapes) > 1:
        raise ConfigError(
            f"sweep entries disagree on latent shape/classes: {sorted(shapes)}"
        )
    input_size, channels, num_classes = shapes.pop()

    step_counts = tuple(int(s) for s in args.steps_list.split(","))
    protocol = EvalProtocol(
        step_counts=step_counts,
        sample_count=args.count,
        sample_seed=args.seed,
        extractor_seed=args.extractor_seed,
        reference_count=args.reference_count,
        guidance_scale=args.cfg_scale,
        clamp_x0=not args.no_clamp,
    )
    dataset = ToyLatents(num_classes, input_size, channels, seed=args.data_seed)
    run_dir = _make_run_dir(args, "sweep")
    records = scaling_sweep(entries, dataset, protocol, cache_dir=run_dir)
    path = run_dir / "sweep.csv"
    write_sweep_csv(records, path)
    skipped = sum(1 for r in records if r.status != "ok")
    _write_manifest(
        run_dir,
        "sweep",
        config={
            "entries": [e.name or model_name(e.config) for e in entries],
            "protocol": dataclasses.asdict(protocol),
        },
        seeds={
            "sample": args.seed,
            "extractor": args.extractor_seed,
            "data": args.data_seed,
        },
        artifacts=[path],
        started=started,
    )
    print(f"wrote {len(records)} sweep records ({skipped} skipped) -> {path}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditlab",
        description="Diffusion-transformer lab: train, sample, and analyze.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_out_dir(p):
        p.add_argument("--out-dir", help="output root (default $DITLAB_RUNS or ./runs)")

    p = sub.add_parser("train", help="train on the procedural toy dataset")
    add_out_dir(p)
    p.add_argument("--config", help="JSON file of settings; flags win")
    p.add_argument("--model", help="'mini', SIZE/PATCH, or a config file")
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--image-size", type=int, help="pixel size; latent = size/8")
    p.add_argument("--latent-size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--ema-decay", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate latents from a checkpoint")
    add_out_dir(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="class_label", type=int,
                   help="class label (omitted = unconditional)")
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="explicit output directory")
    p.add_argument("--raw-weights", action="store_true",
                   help="sample the raw weights instead of the EMA shadow")
    p.add_argument("--clamp-x0", action="store_true",
                   help="clip denoised predictions to [-1, 1] each step")
    p.add_argument("--previews", type=int, default=4,
                   help="number of PPM previews to write")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("flops", help="closed-form compute/parameter breakdown")
    add_out_dir(p)
    p.add_argument("--config", help="JSON file of settings; flags win")
    p.add_argument("--model")
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--image-size", type=int)
    p.add_argument("--latent-size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser(
        "conformance", help="check the flop/parameter model against published tables"
    )
    add_out_dir(p)
    p.set_defaults(func=cmd_conformance)

    p = sub.add_parser("gradcheck", help="finite-difference check on the mini model")
    add_out_dir(p)
    p.add_argument("--variant", choices=VARIANT_CHOICES + ["all"], default="all")
    p.add_argument("--per-tensor", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("schedule", help="dump the diffusion schedule as CSV")
    add_out_dir(p)
    p.add_argument("--t-max", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=2e-2)
    p.add_argument("--steps", type=int, help="respace to this many steps")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sweep", help="metric-versus-compute sweep over checkpoints")
    add_out_dir(p)
    p.add_argument("--ckpt", action="append", help="checkpoint (repeatable)")
    p.add_argument("--grid", help="comma-separated model names for compute-only rows")
    p.add_argument("--steps-list", default="16,32,64,128,256,1000")
    p.add_argument("--count", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extractor-seed", type=int, default=7)
    p.add_argument("--reference-count", type=int, default=10_000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--no-clamp", action="store_true",
                   help="disable per-step clipping of denoised predictions")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
