"""Command-line entry point: ``ropim <subcommand> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage, 3 I/O, 4 format or
config mismatch, 5 numeric failure. Every run writes ``run_config.json`` with
the fully resolved flags under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from ropim import __version__
from ropim.errors import RopimError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5
CONFIG_NAME = "run_config.json"
DEFAULT_RHO = "1/7"

log = logging.getLogger("ropim")


def ratio(text: str) -> Fraction:
    """Parse ``0.25``, ``1/7`` or ``0.143``; ``0.143`` is read as 1/7."""
    try:
        r = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a ratio: {text!r}") from None
    if r == Fraction(143, 1000):
        r = Fraction(1, 7)
    if not (0 < r <= 1):
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1], got {text}")
    return r


def fraction01(text: str) -> Fraction:
    try:
        r = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a fraction: {text!r}") from None
    if not (0 <= r <= 1):
        raise argparse.ArgumentTypeError(f"value must lie in [0, 1], got {text}")
    return r


def show_ratio(r: Fraction) -> str:
    """Three-decimal display form: 1/7 -> 0.143, 1/4 -> 0.25."""
    return f"{float(r):.3f}".rstrip("0").rstrip(".")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--out", default=out_default, help="output directory (default %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("paper", "exact"), default="paper",
                   help="retraction normalization (default %(default)s)")
    p.add_argument("--threads", type=_positive, default=None,
                   help="cap on worker and BLAS threads (default: all cores)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")


def _data_flags(p: argparse.ArgumentParser, synthetic_n: int = 64) -> None:
    p.add_argument("--data", default=None,
                   help="CIFAR-10 binary batch file or directory (default $ROPIM_DATA_DIR)")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic blob dataset")
    p.add_argument("--synthetic-n", type=_positive, default=synthetic_n)
    p.add_argument("--classes", type=_positive, default=4,
                   help="class count of the synthetic dataset (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ropim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ropim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant and gradient self-checks")
    _common(p, "ropim-verify")

    p = sub.add_parser("pretrain", help="pre-train a ViT with the sketch objective")
    _common(p, "ropim-pretrain")
    _data_flags(p)
    p.add_argument("--rho", type=ratio, default=ratio(DEFAULT_RHO),
                   help="sketching ratio (default 0.143, stored exactly as 1/7)")
    p.add_argument("--epochs", type=_positive, default=20)
    p.add_argument("--batch", type=_positive, default=16)
    p.add_argument("--lr", type=float, default=None,
                   help="absolute peak learning rate (default 1.5e-4 * batch / 512)")
    p.add_argument("--warmup", type=float, default=0.0, help="warmup length in epochs")
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--loss", choices=("mean", "sum"), default="mean")
    p.add_argument("--patch", type=_positive, default=4)
    p.add_argument("--dim", type=_positive, default=32)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--heads", type=_positive, default=4)
    p.add_argument("--hflip", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--resized-crop", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--shared-spec", action="store_true",
                   help="ablation: one sketch per batch instead of per image")

    p = sub.add_parser("probe", help="linear probe of a frozen encoder")
    _common(p, "ropim-probe")
    _data_flags(p, synthetic_n=256)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe-epochs", type=_positive, default=100)
    p.add_argument("--subset", default=None,
                   help="comma-separated class ids for a balanced subset, e.g. 0,1")
    p.add_argument("--per-class", type=_positive, default=500)
    p.add_argument("--test-per-class", type=_positive, default=200)

    p = sub.add_parser("analyze-errors", help="token errors of sketching versus masking")
    _common(p, "ropim-errors")
    _data_flags(p, synthetic_n=1000)
    p.add_argument("--rho", type=ratio, default=Fraction(1, 4))
    p.add_argument("--mask-ratio", type=fraction01, default=Fraction(3, 4))
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--n-images", type=_positive, default=1000)
    p.add_argument("--grid", type=_positive, default=16)

    for name, help_text in (("visualize", "render round trip and complement images"),
                            ("reconstruct", "render a model's predicted complement")):
        p = sub.add_parser(name, help=help_text)
        _common(p, f"ropim-{name}")
        _data_flags(p, synthetic_n=16)
        p.add_argument("--image", default=None, help="input PPM (default: --index of the dataset)")
        p.add_argument("--index", type=int, default=0)
        if name == "visualize":
            p.add_argument("--rho", type=ratio, action="append", default=None,
                           help="sketching ratio; repeat for a panel (default 0.5 and 0.75)")
            p.add_argument("--patch", type=_positive, default=None)
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--rho", type=ratio, default=None,
                           help="sketching ratio (default: the checkpoint's)")
    return parser


def _resolved(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if isinstance(v, Fraction):
            out[k] = f"{v.numerator}/{v.denominator}"
        elif isinstance(v, list):
            out[k] = [f"{x.numerator}/{x.denominator}" if isinstance(x, Fraction) else x for x in v]
        else:
            out[k] = v
    out["ropim_version"] = __version__
    out["ropim_data_dir"] = os.environ.get("ROPIM_DATA_DIR")
    return out


def write_run_config(args: argparse.Namespace, out_dir: Path, extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _resolved(args)
    if extra:
        cfg.update(extra)
    path = out_dir / CONFIG_NAME
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def _load_dataset(args, split: str = "train", image_size: int = 32):
    from ropim.data import load_cifar10, synthetic_dataset
    if args.synthetic:
        seed = args.seed if split == "train" else args.seed + 1
        return synthetic_dataset(args.synthetic_n, image_size, 3, args.classes, seed)
    return load_cifar10(args.data, split)


def _dataset_source(args) -> dict:
    if args.synthetic:
        return {"dataset": "synthetic", "synthetic_n": args.synthetic_n, "classes": args.classes}
    from ropim.data import find_cifar_dir
    src = args.data if args.data and Path(args.data).is_file() else str(find_cifar_dir(args.data))
    return {"dataset": "cifar10", "data_path": str(Path(src).resolve())}


def cmd_verify(args) -> int:
    from ropim.verify import active_fault, format_table, run_suite
    out = Path(args.out)
    write_run_config(args, out, {"fault": active_fault()})
    t0 = time.perf_counter()
    results = run_suite()
    table = format_table(results)
    failed = [r.name for r in results if not r.passed]
    footer = (f"all {len(results)} checks passed" if not failed
              else f"FAILED: {', '.join(failed)}") + f" in {time.perf_counter() - t0:.1f}s"
    print(table)
    print(footer)
    (out / "verify.txt").write_text(table + "\n" + footer + "\n")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_pretrain(args) -> int:
    from ropim.pretrain import TrainConfig, pretrain
    from ropim.vit import ViTConfig
    data = _load_dataset(args)
    H = data.image_shape[0]
    vit = ViTConfig(image_size=H, channels=data.image_shape[2], patch_size=args.patch,
                    embed_dim=args.dim, depth=args.depth, heads=args.heads)
    tc = TrainConfig(rho=args.rho, epochs=args.epochs, batch_size=args.batch,
                     base_lr=args.lr if args.lr is not None else TrainConfig.base_lr,
                     scale_lr=args.lr is None, warmup_epochs=args.warmup,
                     weight_decay=args.weight_decay, seed=args.seed, loss_reduction=args.loss,
                     precision=args.precision, mode=args.mode, shared_spec=args.shared_spec,
                     hflip=args.hflip, resized_crop=args.resized_crop)
    out = Path(args.out)
    write_run_config(args, out, {**_dataset_source(args), "vit_config": vit.to_dict(),
                                 "train_config": tc.to_dict(), "peak_lr": tc.peak_lr,
                                 "rho_display": show_ratio(tc.rho)})
    result = pretrain(data, vit, tc, out_dir=out)
    means = result.epoch_means()
    first, last = means[min(means)], means[max(means)]
    print(f"rho={show_ratio(tc.rho)} epochs={tc.epochs} peak_lr={tc.peak_lr:.3g} "
          f"loss epoch1={first:.5f} epoch{max(means)}={last:.5f}")
    print(f"wrote {out / 'checkpoint.ropm'} and {out / 'loss_log.csv'}")
    return EXIT_OK


def cmd_probe(args) -> int:
    from ropim.data import balanced_subset
    from ropim.pretrain import Checkpoint, linear_probe
    ckpt = Checkpoint.load(args.checkpoint)
    size = ckpt.vit_config.image_size
    train = _load_dataset(args, "train", size)
    test = None
    if args.subset:
        classes = [int(c) for c in args.subset.split(",")]
        if args.synthetic:
            train, test = (balanced_subset(train, classes, args.per_class, args.seed),
                           balanced_subset(train, classes, args.test_per_class, args.seed,
                                           offset=args.per_class))
        else:
            test = balanced_subset(_load_dataset(args, "test", size), classes,
                                   args.test_per_class, args.seed)
            train = balanced_subset(train, classes, args.per_class, args.seed)
    out = Path(args.out)
    write_run_config(args, out, _dataset_source(args))
    res = linear_probe(ckpt, train, test, args.probe_epochs, args.seed)
    summary = {"accuracy": res.accuracy, "train_accuracy": res.train_accuracy,
               "n_train": res.n_train, "n_test": res.n_test}
    (out / "probe.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"test accuracy {res.accuracy:.4f} (train {res.train_accuracy:.4f}, "
          f"n_train={res.n_train}, n_test={res.n_test})")
    return EXIT_OK


def cmd_analyze_errors(args) -> int:
    from ropim.analysis import error_study
    data = _load_dataset(args)
    out = Path(args.out)
    write_run_config(args, out, _dataset_source(args))
    study = error_study(data, args.n_images, args.rho, args.mask_ratio, args.threshold,
                        args.seed, args.grid, args.mode, args.threads or 1)
    study.write_csv(out / "errors.csv")
    summary = study.summary()
    summary.update(study.params)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k in ("frac_images_sketch_gt_mask", "frac_images_comp_gt_unmask",
              "mean_err_per_token_sketch", "mean_err_per_masked_token"):
        print(f"{k} = {summary[k]:.4f}")
    print(f"wrote {out / 'errors.csv'} and {out / 'summary.json'}")
    return EXIT_OK


def _input_image(args, size: int = 32) -> np.ndarray:
    if args.image:
        from ropim.analysis import read_ppm
        return read_ppm(args.image).astype(np.float64) / 255.0
    data = _load_dataset(args, "train", size)
    if not 0 <= args.index < len(data):
        raise IndexError(f"--index {args.index} outside dataset of {len(data)} images")
    return data.images[args.index]


def cmd_visualize(args) -> int:
    from ropim.analysis import figure_panel, visualize
    rhos = args.rho or [Fraction(1, 2), Fraction(3, 4)]
    image = _input_image(args)
    out = Path(args.out)
    write_run_config(args, out, {"rho": [f"{r.numerator}/{r.denominator}" for r in rhos]})
    for r in rhos:
        tag = f"rho{float(r):.3g}_"
        visualize(image, r, args.seed, out, args.patch, args.mode, prefix=tag)
    figure_panel(image, rhos, args.seed, out, args.patch, args.mode)
    print(f"wrote {4 * len(rhos) + 1} images to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from ropim.analysis import reconstruct_demo, l1
    from ropim.pretrain import Checkpoint
    ckpt = Checkpoint.load(args.checkpoint)
    image = _input_image(args, ckpt.vit_config.image_size)
    rho = args.rho if args.rho is not None else ckpt.train_config.rho
    out = Path(args.out)
    write_run_config(args, out, {"rho": f"{rho.numerator}/{rho.denominator}"})
    res = reconstruct_demo(ckpt, image, rho, args.seed, out, args.mode)
    print(f"l1(sketched, original) = {l1(res.images['sketched'], image):.4f}, "
          f"l1(reconstruction, original) = {l1(res.images['reconstruction'], image):.4f}")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "pretrain": cmd_pretrain, "probe": cmd_probe,
            "analyze-errors": cmd_analyze_errors, "visualize": cmd_visualize,
            "reconstruct": cmd_reconstruct}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except RopimError as exc:
        print(f"ropim {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"ropim {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError) as exc:
        print(f"ropim {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ropim {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"ropim {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
