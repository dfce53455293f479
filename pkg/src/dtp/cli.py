"""Command-line surface: run a stylization, compare images, inspect weights.

Exit codes are part of the contract: 0 success, 2 bad flags or values,
3 I/O or file-format failure, 4 non-finite loss abort.  Every failure
prints a one-line diagnostic to stderr.

The environment variable DTP_THREADS caps BLAS/OpenMP thread counts.  It
must take effect before numpy first loads, which is why this module sets
the standard thread-count variables at import time, ahead of the imports
below, and why the package __init__ stays free of numpy.
"""

import os as _os

_t = _os.environ.get("DTP_THREADS")
if _t and _t.isdigit() and int(_t) > 0:
    for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_v, _t)
del _os, _t

import argparse
import hashlib
import os
import sys

from .errors import (
    ConfigError,
    ImageError,
    NanLoss,
    WeightFormatError,
    WeightStoreMismatch,
)
from .pipeline import ABLATION_NAMES, Ablations, DtpConfig

_LAMBDA_W_DEFAULT = 1.0 / 9.0

# accepted --ablate tokens (kebab case, plus the short forms)
_ABLATE_TOKENS = {
    "no-warped-feature": "no_warped_feature",
    "no-warped-image": "no_warped_image",
    "no-fma": "no_fma",
    "no-cycle": "no_cycle",
    "no-cyc": "no_cycle",
    "no-generator": "no_generator",
    "no-gen": "no_generator",
}


def _fail(code, message):
    print(f"dtp: {message}", file=sys.stderr)
    return code


def _parse_ablations(spec):
    flags = {}
    for raw in (spec or "").split(","):
        token = raw.strip().lower().replace("_", "-")
        if not token:
            continue
        if token not in _ABLATE_TOKENS:
            raise ConfigError(
                f"unknown ablation {raw.strip()!r} (choose from "
                + ", ".join(sorted(set(_ABLATE_TOKENS) - {"no-cyc", "no-gen"}))
                + ")"
            )
        flags[_ABLATE_TOKENS[token]] = True
    return Ablations(**flags)


def _config_from_args(args):
    lambda_w = args.lambda_w if args.lambda_w is not None else _LAMBDA_W_DEFAULT
    return DtpConfig(
        size=args.size,
        iters=args.iters,
        lr=args.lr,
        tau=args.tau,
        lambda_w=lambda_w,
        momentum_m=args.momentum,
        lambda_c=args.lambda_c,
        lambda_cyc=args.lambda_cyc,
        seed=args.seed,
        snapshot_every=args.snapshot_every,
        ablations=_parse_ablations(args.ablate),
        weights_source=args.weights,
    )


def _config_header(cfg):
    """The comment lines at the top of report.csv echoing the run config."""
    lines = [
        f"# size={cfg.size}",
        f"# iters={cfg.iters}",
        f"# lr={cfg.lr!r}",
        f"# tau={cfg.tau!r}",
        f"# lambda_w={cfg.lambda_w!r}",
        f"# momentum_m={cfg.momentum_m!r}",
        f"# lambda_c={cfg.lambda_c!r}",
        f"# lambda_cyc={cfg.lambda_cyc!r}",
        f"# seed={cfg.seed}",
        f"# snapshot_every={cfg.snapshot_every}",
        f"# weights={cfg.weights_source}",
        "# ablations=" + ",".join(cfg.ablations.enabled()),
    ]
    return lines


def cmd_run(args):
    from .image_io import load_png, resize_bilinear, save_png, ssim
    from .pipeline import run_dtp

    try:
        cfg = _config_from_args(args)
    except ConfigError as e:
        return _fail(2, str(e))
    try:
        content = load_png(args.content)
        style = load_png(args.style)
        os.makedirs(args.out, exist_ok=True)
    except (ImageError, OSError) as e:
        return _fail(3, str(e))

    def snapshot(report, image):
        if cfg.snapshot_every and report.iteration % cfg.snapshot_every == 0:
            path = os.path.join(args.out, f"iter_{report.iteration}.png")
            save_png(image, path)
            report.snapshot_path = path

    try:
        final, reports = run_dtp(content, style, cfg, callback=snapshot)
    except NanLoss as e:
        return _fail(4, str(e))
    except (WeightFormatError, WeightStoreMismatch, ImageError, OSError) as e:
        return _fail(3, str(e))

    try:
        save_png(final, os.path.join(args.out, "final.png"))
        rows = [
            f"{r.iteration},{r.l_cont!r},{r.l_style!r},{r.l_cyc!r},{r.l_total!r}"
            for r in reports
        ]
        body = _config_header(cfg) + ["iteration,l_cont,l_style,l_cyc,l_total"] + rows
        with open(os.path.join(args.out, "report.csv"), "w") as f:
            f.write("\n".join(body) + "\n")
    except OSError as e:
        return _fail(3, str(e))

    if args.metrics:
        target = resize_bilinear(content, cfg.size, cfg.size)
        print(f"SSIM: {ssim(final, target):.4f}")
    return 0


def cmd_ssim(args):
    from .image_io import load_png, resize_bilinear, ssim

    try:
        a = load_png(args.a)
        b = load_png(args.b)
    except (ImageError, OSError) as e:
        return _fail(3, str(e))
    if args.size is not None:
        a = resize_bilinear(a, args.size, args.size)
        b = resize_bilinear(b, args.size, args.size)
    elif a.shape != b.shape:
        return _fail(
            2,
            f"image sizes differ ({a.shape[1]}x{a.shape[0]} vs "
            f"{b.shape[1]}x{b.shape[0]}); pass --size to compare anyway",
        )
    print(f"SSIM: {ssim(a, b):.4f}")
    return 0


def cmd_inspect_weights(args):
    from .dtpw import load_weights

    try:
        with open(args.path, "rb") as f:
            blob = f.read()
        store = load_weights(args.path)
    except WeightFormatError as e:
        return _fail(3, str(e))
    except OSError as e:
        return _fail(3, str(e))
    for name in store.names():
        a = store[name]
        print(f"{name} {tuple(a.shape)} {a.dtype.name}")
    print(f"sha256 {hashlib.sha256(blob).hexdigest()}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dtp",
        description="Test-time-trained photorealistic style transfer.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="stylize one content/style pair")
    run.add_argument("--content", required=True, help="content image (PNG)")
    run.add_argument("--style", required=True, help="style image (PNG)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument(
        "--weights",
        default="random",
        help="encoder weights: a .dtpw path, or 'random' (default)",
    )
    run.add_argument("--size", type=int, default=256, help="working size (default 256)")
    run.add_argument("--iters", type=int, default=1000, help="iterations (default 1000)")
    run.add_argument("--lr", type=float, default=1e-4, help="learning rate (default 1e-4)")
    run.add_argument("--tau", type=float, default=0.07, help="softmax temperature (default 0.07)")
    run.add_argument(
        "--lambda-w",
        type=float,
        default=None,
        help="decoder-residual blend weight (default 0.111111)",
    )
    run.add_argument(
        "--lambda-c", type=float, default=0.2, help="style-term weight (default 0.2)"
    )
    run.add_argument(
        "--lambda-cyc", type=float, default=1.0, help="cycle-term weight (default 1)"
    )
    run.add_argument(
        "--momentum",
        type=float,
        default=0.4,
        help="feature moving-average momentum (default 0.4)",
    )
    run.add_argument("--seed", type=int, default=1006, help="RNG seed (default 1006)")
    run.add_argument(
        "--snapshot-every",
        type=int,
        default=0,
        help="write iter_{N}.png every N iterations (default 0: never)",
    )
    run.add_argument(
        "--ablate",
        default="",
        metavar="LIST",
        help="comma list of no-warped-feature, no-warped-image, no-fma, "
        "no-cycle (no-cyc), no-generator (no-gen)",
    )
    run.add_argument(
        "--metrics",
        action="store_true",
        help="print SSIM between the result and the content image",
    )
    run.set_defaults(func=cmd_run)

    sm = sub.add_parser("ssim", help="structural similarity of two images")
    sm.add_argument("a", help="first image (PNG)")
    sm.add_argument("b", help="second image (PNG)")
    sm.add_argument(
        "--size", type=int, default=None, help="resize both to SIZE x SIZE first"
    )
    sm.set_defaults(func=cmd_ssim)

    iw = sub.add_parser("inspect-weights", help="list tensors in a .dtpw file")
    iw.add_argument("path", help="weight file")
    iw.set_defaults(func=cmd_inspect_weights)
    return p


def main(argv=None):
    t = os.environ.get("DTP_THREADS")
    if t is not None and not (t.isdigit() and int(t) > 0):
        return _fail(2, f"DTP_THREADS must be a positive integer, got {t!r}")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
