"""Command-line entry point: ``nlccam {synth,train,eval,render,gradcheck}``.

Exit codes: 0 success, 1 invalid arguments, 2 runtime or check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import storage
from .combiner import CombinationFn, TopBottom, parse_combination_list
from .model import (
    ModelConfig,
    grad_check_model,
    load_model,
    param_shapes,
    save_model,
    small_config,
    train,
)
from .pipeline import evaluate, localization_map, predict_dataset, rank_maps
from .localization import bbox_from_map, normalize_map
from .synth_data import SynthConfig, generate, load_split, write_dataset
from .tensor_core import bilinear_resize

log = logging.getLogger("nlccam")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
DEFAULT_COMBINE = "topbot:i=1,b=10"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _tau(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"tau must lie in (0, 1), got {text}")
    return value


def _combos(text: str) -> list[CombinationFn]:
    try:
        combos = parse_combination_list(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not combos:
        raise argparse.ArgumentTypeError("no combination function given")
    return combos


def _widths(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated widths, got {text!r}") from None
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return a, b


def fit_to_classes(combos: list[CombinationFn], num_classes: int) -> list[CombinationFn]:
    """Clip TopBottom bottom counts so that i + b <= K."""
    out = []
    for g in combos:
        if isinstance(g, TopBottom) and g.i + g.b > num_classes:
            if g.i > num_classes:
                raise UsageError(f"{g}: top count exceeds K={num_classes}")
            clipped = TopBottom(g.i, num_classes - g.i)
            log.warning("clipping %s to %s for K=%d", g, clipped, num_classes)
            g = clipped
        out.append(g)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nlccam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=_non_negative_int, default=250)
    p.add_argument("--test-per-class", type=_non_negative_int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a dataset's train split")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--nl-low", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--nl-high", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--epochs", type=_non_negative_int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=_positive_int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=_positive_int, default=ModelConfig.patch)
    p.add_argument("--widths", type=_widths, default=ModelConfig.widths)
    p.add_argument("--reduction", type=_positive_int, default=ModelConfig.reduction)

    p = sub.add_parser("eval", help="evaluate localization on the test split")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--combine", type=_combos, default=_combos(DEFAULT_COMBINE))
    p.add_argument("--tau", type=_tau, default=0.2)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--gt-known", action="store_true")
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("render", help="write ranked activation maps of one image")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image-id", required=True)
    p.add_argument("--combine", type=_combos, default=_combos(DEFAULT_COMBINE))
    p.add_argument("--tau", type=_tau, default=0.2)
    p.add_argument("--style", choices=("gray", "color"), default="color")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of all model gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", choices=("small",), default="small")
    p.add_argument("--corrupt-backward", metavar="PARAM", help=argparse.SUPPRESS)
    return parser


def cmd_synth(args) -> int:
    size = args.size
    try:
        cfg = SynthConfig(
            num_classes=args.classes,
            train_per_class=args.per_class,
            test_per_class=args.test_per_class,
            image_size=size,
            blob_min=max(1, round(size * 3 / 8)),
            blob_max=max(1, round(size * 5 / 8)),
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_ds, test_ds = generate(cfg)
    write_dataset(args.out, train_ds, test_ds)
    print(f"wrote {len(train_ds)} train and {len(test_ds)} test images to {args.out}")
    return EXIT_OK


def _split_path(data: Path, split: str) -> Path:
    path = data / f"{split}.tsv" if data.is_dir() else data
    if not path.exists():
        raise UsageError(f"no manifest at {path}")
    return path


def cmd_train(args) -> int:
    ds = load_split(_split_path(args.data, "train"))
    _, cin, h, w = ds.images.shape
    try:
        cfg = ModelConfig(
            image_size=(h, w),
            in_channels=cin,
            patch=args.patch,
            widths=args.widths,
            num_classes=int(ds.labels.max()) + 1,
            nl_low=args.nl_low,
            nl_high=args.nl_high,
            reduction=args.reduction,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log_path = args.out.with_name(args.out.name + ".loss.txt")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as fh:
        ckpt = train(ds.images, ds.labels, cfg, args.epochs, args.lr, args.batch, log_file=fh)
    save_model(args.out, ckpt)
    final = ckpt.losses[-1] if ckpt.losses else float("nan")
    print(f"trained {args.epochs} epochs, final loss {final:.6f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_model(args.ckpt)
    ds = load_split(_split_path(args.data, args.split))
    combos = fit_to_classes(args.combine, ckpt.config.num_classes)
    preds = predict_dataset(ds, ckpt)
    rows = []
    for g in combos:
        _, report = evaluate(preds, ckpt, g, args.tau, gt_known=args.gt_known)
        for row in report.rows:
            rows.append((f"{g}/{row.name}_err", row.error, row.correct, row.total))
            print(f"{str(g):>18}  {row.name:<13} err {row.error:6.2f}%  ({row.correct}/{row.total})")
    storage.write_report(args.out, rows)
    return EXIT_OK


def _find_image(data: Path, image_id: str):
    manifests = [data] if data.is_file() else [data / "test.tsv", data / "train.tsv"]
    for manifest in manifests:
        if manifest.exists() and any(e.image_id == image_id for e in storage.read_manifest(manifest)):
            return load_split(manifest)
    raise UsageError(f"image id {image_id!r} not found under {data}")


RENDER_SLOTS = ("top1", "top2", "top3", "bottom3", "bottom2", "bottom1")


def cmd_render(args) -> int:
    ckpt = load_model(args.ckpt)
    ds = _find_image(args.data, args.image_id)
    i = ds.index(args.image_id)
    sub = type(ds)([ds.ids[i]], ds.images[i : i + 1], ds.labels[i : i + 1], [ds.boxes[i]])
    pred = predict_dataset(sub, ckpt)[0]
    k = ckpt.config.num_classes
    g = fit_to_classes(args.combine[:1], k)[0]
    h, w = ckpt.config.image_size
    combined = localization_map(pred, ckpt, g)
    box = bbox_from_map(combined, args.tau, h, w)
    ranks = [min(r, k) for r in (1, 2, 3)] + [max(r, 1) for r in (k - 2, k - 1, k)]
    maps = rank_maps(pred, ckpt, ranks) + [combined]
    ext = "pgm" if args.style == "gray" else "ppm"
    args.out.mkdir(parents=True, exist_ok=True)
    for slot, m in zip(RENDER_SLOTS + ("ccam",), maps):
        path = args.out / f"{args.image_id}_{slot}.{ext}"
        storage.render_heatmap(
            normalize_map(bilinear_resize(m, h, w)), path, args.style, box, pred.gt_boxes[0]
        )
        print(path)
    print(f"predicted box {box.as_tuple()} with {g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = small_config(seed=args.seed)
    if args.corrupt_backward and args.corrupt_backward not in param_shapes(cfg):
        raise UsageError(f"unknown parameter {args.corrupt_backward!r}")
    report = grad_check_model(cfg, seed=args.seed, corrupt=args.corrupt_backward)
    groups: dict[str, float] = {}
    for name, err in report.errors.items():
        group = name.split(".")[0]
        groups[group] = max(groups.get(group, 0.0), err)
    for name, err in report.errors.items():
        print(f"{name:<10} max rel err {err:.3e}")
    for group, err in groups.items():
        print(f"group {group:<6} max rel err {err:.3e}  {'ok' if err <= report.tolerance else 'FAIL'}")
    print(f"overall max rel err {report.max_error:.3e} (tolerance {report.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_FAIL


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nlccam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"nlccam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
