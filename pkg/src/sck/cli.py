"""Command-line entry point: ``sck detect | eval-pair | eval-illum | warp``.

Exit codes: 0 ok, 1 runtime/I-O failure, 2 usage error, 3 property check failed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

from .detector import DetectorConfig, detect, format_keypoints
from .evaluation import (
    ProjectionError,
    SingularHomographyError,
    evaluate_pair,
    illumination_harness,
    parse_homography,
    warp_image,
)
from .haar import ConfigurationError, build_haar, max_levels
from .image_io import ImageIOError, load_image, save_image, write_overlay
from .lasso import set_threads

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3

# config-file / flag spelling -> DetectorConfig field (or run option)
KEY_ALIASES = {
    "n": "n",
    "lambda": "lam",
    "lam": "lam",
    "cm-min": "cm_min",
    "cm-max": "cm_max",
    "nms": "nms_window",
    "nms-window": "nms_window",
    "topk": "max_keypoints",
    "max-keypoints": "max_keypoints",
    "sigma": "gauss_sigma",
    "gauss-sigma": "gauss_sigma",
    "gsize": "gauss_size",
    "gauss-size": "gauss_size",
    "a1": "a1",
    "a2": "a2",
    "stride": "stride",
    "tol": "tol",
    "max-iter": "max_iter",
    "levels": "levels",
    "threads": "threads",
    "out": "out",
    "overlay": "overlay",
}
RUN_OPTIONS = {"levels": int, "threads": int, "out": str, "overlay": str}


class UsageError(Exception):
    pass


def _field_types() -> dict:
    types = {"cm_max": int}
    for f in fields(DetectorConfig):
        if f.name not in types:
            types[f.name] = type(getattr(DetectorConfig(), f.name))
    return types


def parse_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    types = {**_field_types(), **RUN_OPTIONS}
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        name = KEY_ALIASES.get(key.replace("_", "-"), None)
        if name is None:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[name] = types[name](value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def _add_detector_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("detector")
    g.add_argument("--n", type=int, help="block side, odd (default 11)")
    g.add_argument("--lambda", dest="lam", type=float, help="L1 weight (default 0.15)")
    g.add_argument("--cm-min", type=int, help="lower complexity limit (default 3)")
    g.add_argument("--cm-max", type=int, help="upper complexity limit (default: atom count)")
    g.add_argument("--nms", dest="nms_window", type=int, help="suppression window side, odd (default 5)")
    g.add_argument("--topk", dest="max_keypoints", type=int, help="key-point cap (default 1000)")
    g.add_argument("--sigma", dest="gauss_sigma", type=float, help="pre-filter sigma (default 0.5)")
    g.add_argument("--gsize", dest="gauss_size", type=int, help="pre-filter kernel side (default 3)")
    g.add_argument("--a1", type=float, help="strength weight on the L0 count (default 1)")
    g.add_argument("--a2", type=float, help="strength weight on the L1 norm (default 1)")
    g.add_argument("--stride", type=int, help="block step (default 1)")
    g.add_argument("--levels", type=int, help="Haar decomposition depth (default min(5, max))")
    g.add_argument("--config", help="key = value config file; flags override it")
    g.add_argument("--threads", type=int, help="worker cap (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sck", description="Sparse-coding key-point detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect key-points in one image")
    p.add_argument("image")
    _add_detector_flags(p)
    p.add_argument("--out", help="write the key-point list here instead of stdout")
    p.add_argument("--overlay", help="also write an RGB overlay (.ppm or .png)")

    p = sub.add_parser("eval-pair", help="repeatability and matching score for an image pair")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("homography", help="file with 9 reals, row-major, mapping A to B")
    p.add_argument("--format", choices=("json", "text"), default="json")
    _add_detector_flags(p)

    p = sub.add_parser("eval-illum", help="check detections under I -> a*I + b")
    p.add_argument("image")
    p.add_argument("--a", type=float, default=2.0, help="gain (> 0)")
    p.add_argument("--b", type=float, default=10.0, help="offset")
    _add_detector_flags(p)

    p = sub.add_parser("warp", help="warp an image through a homography")
    p.add_argument("image")
    p.add_argument("homography")
    p.add_argument("output")
    return parser


def resolve(args) -> tuple[DetectorConfig, dict]:
    """Layer defaults <- config file <- flags."""
    values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for name in [f.name for f in fields(DetectorConfig)] + list(RUN_OPTIONS):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    run = {k: values.pop(k) for k in list(values) if k in RUN_OPTIONS}
    try:
        cfg = replace(DetectorConfig(), **values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    levels = run.get("levels", min(5, max_levels(cfg.n)))
    if not 1 <= levels <= max_levels(cfg.n):
        raise UsageError(f"levels must be in [1, {max_levels(cfg.n)}] for n={cfg.n}")
    run["levels"] = levels
    threads = run.get("threads")
    if threads is not None and threads < 1:
        raise UsageError(f"threads must be >= 1, got {threads}")
    return cfg, run


def _read_homography(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from None
    try:
        return parse_homography(text)
    except (ValueError, SingularHomographyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_detect(args) -> int:
    cfg, run = resolve(args)
    set_threads(run.get("threads"))
    img = load_image(args.image)
    d = build_haar(cfg.n, run["levels"])
    kps = detect(img, d, cfg)
    text = format_keypoints(kps, cfg, d)
    out = run.get("out")
    if out:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise ImageIOError(f"{out}: {exc.strerror or exc}") from None
    else:
        sys.stdout.write(text)
    if run.get("overlay"):
        write_overlay(img, kps, run["overlay"])
    return EXIT_OK


def cmd_eval_pair(args) -> int:
    cfg, run = resolve(args)
    H = _read_homography(args.homography)
    set_threads(run.get("threads"))
    img_a, img_b = load_image(args.image_a), load_image(args.image_b)
    d = build_haar(cfg.n, run["levels"])
    res = evaluate_pair(img_a, img_b, H, d, cfg)
    sys.stdout.write(res.to_json() + "\n" if args.format == "json" else res.to_text())
    return EXIT_OK


def cmd_eval_illum(args) -> int:
    if not args.a > 0:
        raise UsageError(f"gain a must be > 0, got {args.a}")
    cfg, run = resolve(args)
    set_threads(run.get("threads"))
    img = load_image(args.image)
    d = build_haar(cfg.n, run["levels"])
    report = illumination_harness(img, d, cfg, args.a, args.b)
    sys.stdout.write("\n".join(report.lines()) + "\n")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_warp(args) -> int:
    H = _read_homography(args.homography)
    img = load_image(args.image)
    save_image(warp_image(img, H), args.output)
    return EXIT_OK


COMMANDS = {
    "detect": cmd_detect,
    "eval-pair": cmd_eval_pair,
    "eval-illum": cmd_eval_illum,
    "warp": cmd_warp,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"sck: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageIOError, ProjectionError, OSError, ValueError) as exc:
        print(f"sck: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
