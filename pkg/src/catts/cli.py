"""Command-line front end: run, scale, calibrate, reward-demo, and noise."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .backends import make_backend
from .config import RunConfig
from .errors import CattsError
from .images import (
    perturb,
    read_pnm_file,
    saliency_from_image,
    uniform_saliency,
    write_pnm_file,
)
from .pipeline import run_calibration, run_dataset, run_scaling
from .training import DemoConfig, run_demo


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--dataset", required=True, help="JSON-lines dataset file")
    parser.add_argument("--out-dir", required=True, help="directory for traces and reports")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--backend",
        help="base model backend: simulated:<scenario.json> or an http(s) URL",
    )
    parser.add_argument(
        "--expert-backend",
        help="expert model backend (same forms); omit to disable expert roles",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catts",
        description="Confidence-aware test-time scaling pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline over a dataset")
    _add_run_flags(run)

    scale = sub.add_parser("scale", help="accuracy vs sample count for all methods")
    _add_run_flags(scale)
    scale.add_argument(
        "--n-list",
        help="comma-separated sample counts (default from config, 1,2,4,8,16,32)",
    )

    calibrate = sub.add_parser(
        "calibrate", help="per-condition confidence report over tagged records"
    )
    _add_run_flags(calibrate)

    demo = sub.add_parser(
        "reward-demo", help="train the toy calibration policy and report metrics"
    )
    demo.add_argument("--out-dir", required=True)
    demo.add_argument("--seed", type=int, default=17)
    demo.add_argument("--steps", type=int, help="override the demo step count")

    noise = sub.add_parser("noise", help="build a perturbed copy of a P5/P6 image")
    noise.add_argument("--in", dest="image", required=True, help="input .ppm/.pgm")
    noise.add_argument("--saliency", help="grayscale saliency map (.pgm); default uniform")
    noise.add_argument("--sigma", type=float, default=64.0)
    noise.add_argument("--seed", type=int, default=0)
    noise.add_argument("--out", required=True)
    noise.add_argument(
        "--kind", choices=("noise", "occlusion", "mosaic"), default="noise"
    )
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.backend:
        config = replace(config, backend=args.backend)
    if getattr(args, "expert_backend", None):
        config = replace(config, expert_backend=args.expert_backend)
    return config


def _make_backends(config: RunConfig):
    if not config.backend:
        raise CattsError("no backend configured; pass --backend or set it in the config")
    http_kwargs = dict(
        timeout=config.http_timeout,
        retries=config.http_retries,
        backoff=config.http_backoff,
        jitter=config.http_jitter,
    )
    backend = make_backend(config.backend, model=config.model, **http_kwargs)
    expert = None
    if config.expert_backend:
        expert = make_backend(
            config.expert_backend, model=config.expert_model, **http_kwargs
        )
    return backend, expert


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args)
    backend, expert = _make_backends(config)
    summary = run_dataset(args.dataset, config, backend, expert, args.out_dir)
    print(
        f"{summary.n_questions} questions, accuracy {summary.accuracy:.3f}, "
        f"{summary.n_skipped} skipped, {summary.n_errors} errors -> {summary.trace_path}"
    )
    for problem in summary.problems:
        print(f"skipped: {problem}", file=sys.stderr)
    return summary.exit_code


def _cmd_scale(args: argparse.Namespace) -> int:
    config = _load_config(args)
    backend, expert = _make_backends(config)
    n_list = None
    if args.n_list:
        n_list = [int(x) for x in args.n_list.split(",") if x.strip()]
    result = run_scaling(args.dataset, config, backend, expert, n_list, args.out_dir)
    for method, fit in result.fits.items():
        if fit is None:
            print(f"{method}: slope undefined (single sample count)")
        else:
            print(f"{method}: slope {fit['slope']:.3f}, intercept {fit['intercept']:.3f}")
    return 0


def _cmd_calibrate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    backend, _ = _make_backends(config)
    report = run_calibration(args.dataset, config, backend, args.out_dir)
    for condition, row in report["conditions"].items():
        drop = "-" if row["confidence_drop"] is None else f"{row['confidence_drop']:+.4f}"
        print(
            f"{condition}: n={row['n']} acc={row['accuracy']:.3f} "
            f"ece={row['ece']:.4f} cd={drop}"
        )
    return 0


def _cmd_reward_demo(args: argparse.Namespace) -> int:
    config = DemoConfig() if args.steps is None else DemoConfig(steps=args.steps)
    result = run_demo(config, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["step,mean_reward,ece,cd,accuracy"]
    for row in result.curve:
        lines.append(
            f"{row['step']},{row['mean_reward']:.6f},{row['ece']:.6f},"
            f"{row['cd']:.6f},{row['accuracy']:.6f}"
        )
    (out_dir / "curve.csv").write_text("\n".join(lines) + "\n", "utf-8")
    payload = {
        "seed": args.seed,
        "steps": config.steps,
        "before": result.before.to_dict(),
        "after": result.after.to_dict(),
    }
    (out_dir / "demo_report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8"
    )
    print(
        f"ece {result.before.ece:.4f} -> {result.after.ece:.4f}, "
        f"cd {result.before.confidence_drop:+.4f} -> {result.after.confidence_drop:+.4f}, "
        f"accuracy {result.before.accuracy:.3f} -> {result.after.accuracy:.3f}"
    )
    return 0


def _cmd_noise(args: argparse.Namespace) -> int:
    image = read_pnm_file(args.image)
    if args.saliency:
        saliency = saliency_from_image(read_pnm_file(args.saliency))
    else:
        saliency = uniform_saliency(image.width, image.height)
    out = perturb(image, saliency, args.kind, sigma=args.sigma, seed=args.seed)
    write_pnm_file(args.out, out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "scale": _cmd_scale,
    "calibrate": _cmd_calibrate,
    "reward-demo": _cmd_reward_demo,
    "noise": _cmd_noise,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CattsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
