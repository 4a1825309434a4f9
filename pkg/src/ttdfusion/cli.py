"""Batch front-end: ``ttdfusion <subcommand> [input] [options]``.

Input datasets are directories.  Every sub-directory is one item whose
sources are its ``*.png`` / ``*.pgm`` files in name order (``mask.pgm`` is
ignored); a directory without sub-directories is a single item.  The
``synth`` layout therefore works as input directly.  ``theory``, ``ablate``
and ``train`` generate a seeded synthetic set when no input is given.

Options may also come from ``--config FILE`` (``key=value`` lines using the
long option names); options given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .codec import CodecSpec, TrainConfig, load_params, loss_gradients, parse_key_values, save_params, train_toy
from .engine import (
    NORMS,
    VARIANTS,
    WeightForm,
    export_loss_maps,
    export_weight_maps,
    run_pipeline,
    select_gradient_channel,
    stage_one,
)
from .imaging import load_image, quantize8, save_image
from .metrics import CSV_COLUMNS, evaluate_all
from .parallel import pmap
from .report import covariance_figure, render_heatmap, strategy_figure
from .synth import generate_pair, scene_specs, write_dataset
from .theory import compare_strategies, geb_decomposition, strategies_csv

log = logging.getLogger("ttdfusion")

COMMANDS = ("fuse", "weights", "eval", "train", "synth", "theory", "ablate")
IMAGE_SUFFIXES = (".png", ".pgm")
U64_MAX = 2**64 - 1
CALIBRATION_ITEMS = 8

DEFAULTS = {
    "codec": "pyramid",
    "params": None,
    "form": "rd",
    "norm": "softmax",
    "grad_channel": None,
    "out": None,
    "csv": None,
    "seed": 0,
    "jobs": 1,
    "force_unnormalized": False,
    "fused": None,
    "export_weights": False,
    "count": 30,
    "size": 64,
    "density": 0.5,
    "epochs": 5,
    "lr": 0.05,
    "batch": 8,
    "features": 8,
    "kernel": 3,
    "loss_norm": "mae",
}
INT_KEYS = {"grad_channel", "seed", "jobs", "count", "size", "epochs", "batch", "features", "kernel"}
FLOAT_KEYS = {"density", "lr"}
BOOL_KEYS = {"force_unnormalized", "export_weights"}


class CliError(Exception):
    pass


class OneLineParser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


class Outputs:
    """Records every file and directory created so a failed run can undo them."""

    def __init__(self):
        self.files: list[Path] = []
        self.dirs: list[Path] = []

    def mkdir(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.dirs.extend(reversed(missing))
        return path

    def file(self, path) -> Path:
        path = Path(path)
        self.mkdir(path.parent)
        if not path.exists():
            self.files.append(path)
        return path

    def track_tree(self, root: Path):
        for p in sorted(root.rglob("*")):
            (self.files if p.is_file() else self.dirs).append(p)

    def rollback(self):
        for f in self.files:
            if f.is_file():
                f.unlink()
        for d in sorted(self.dirs, key=lambda p: len(p.parts), reverse=True):
            if d.is_dir():
                shutil.rmtree(d, ignore_errors=True)


# ------------------------------------------------------------------ arguments


def build_parser() -> argparse.ArgumentParser:
    parser = OneLineParser(prog="ttdfusion", description="Test-time dynamic image fusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=OneLineParser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("input", nargs="?", default=None, help="dataset directory")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--codec", choices=("constant", "pyramid", "toynet"), default=None)
        p.add_argument("--params", default=None, help="toy-net parameter file")
        p.add_argument("--form", choices=VARIANTS, default=None)
        p.add_argument("--norm", choices=NORMS, default=None)
        p.add_argument("--grad-channel", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--csv", default=None, help="CSV output file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--force-unnormalized", action="store_true", default=None)
        p.add_argument("--fused", default=None, help="eval: directory of <item>.png fused images")
        p.add_argument("--export-weights", action="store_true", default=None, help="fuse: also write weight maps")
        p.add_argument("--count", type=int, default=None, help="synthetic scene count")
        p.add_argument("--size", type=int, default=None, help="synthetic scene side length")
        p.add_argument("--density", type=float, default=None, help="synthetic texture density")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--features", type=int, default=None)
        p.add_argument("--kernel", type=int, default=None)
        p.add_argument("--loss-norm", choices=("mae", "rms"), default=None)
    return parser


def _config_value(key: str, raw: str):
    if key in INT_KEYS:
        return int(raw)
    if key in FLOAT_KEYS:
        return float(raw)
    if key in BOOL_KEYS:
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise CliError(f"config: {key} must be a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    return raw


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge command line, config file and defaults (in that priority)."""
    conf = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}") from exc
        for key, raw in parse_key_values(text).items():
            key = key.replace("-", "_")
            if key not in DEFAULTS and key != "input":
                raise CliError(f"config: unknown key {key!r}")
            try:
                conf[key] = _config_value(key, raw)
            except ValueError as exc:
                raise CliError(f"config: bad value for {key}: {raw!r}") from exc
    for key in ("input", *DEFAULTS):
        if getattr(args, key, None) is None:
            setattr(args, key, conf.get(key, DEFAULTS.get(key)))
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1")
    if not 0 <= args.seed <= U64_MAX:
        raise CliError("--seed must be an unsigned 64-bit integer")
    return args


# ---------------------------------------------------------------------- inputs


def _sources_in(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and p.name != "mask.pgm")


def load_items(root) -> list[tuple[str, list[np.ndarray]]]:
    root = Path(root)
    if not root.is_dir():
        raise CliError(f"input {root} is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    groups = [(d.name, _sources_in(d)) for d in subdirs] if subdirs else [(root.name, _sources_in(root))]
    items = []
    for name, paths in groups:
        if len(paths) < 2:
            raise CliError(f"item {name}: need at least two source images, found {len(paths)}")
        items.append((name, [load_image(p) for p in paths]))
    return items


def synthetic_items(args) -> list[tuple[str, list[np.ndarray]]]:
    specs = scene_specs(args.count, args.seed, args.size, args.density)
    return [(f"scene{i:04d}", list(generate_pair(s)[:2])) for i, s in enumerate(specs)]


def dataset(args) -> list[tuple[str, list[np.ndarray]]]:
    return load_items(args.input) if args.input else synthetic_items(args)


def codec_from(args, channels: int = 1):
    if args.codec == "toynet":
        if not args.params:
            raise CliError("--codec toynet needs --params")
        params, spec = load_params(args.params)
        if spec is None:
            c, k_feat, k = params.shape
            spec = CodecSpec("toynet", features=k_feat, kernel=k, image_channels=c)
        return spec, params
    if args.params:
        raise CliError("--params only applies to --codec toynet")
    return CodecSpec(args.codec, image_channels=channels), None


def form_from(args, spec, params, items) -> WeightForm:
    if args.form == "grad":
        if spec.backend != "toynet":
            raise CliError("--form grad needs --codec toynet")
        channel = args.grad_channel
        if channel is None:
            batch = [[loss_gradients(spec, params, x).features for x in srcs]
                     for _, srcs in items[:CALIBRATION_ITEMS]]
            channel = select_gradient_channel(batch)
            log.info("gradient channel %d selected on %d calibration items", channel, len(batch))
        return WeightForm("grad", args.norm, grad_channel=channel)
    if args.grad_channel is not None:
        raise CliError("--grad-channel only applies to --form grad")
    return WeightForm(args.form, args.norm)


def _require(value, flag):
    if value is None:
        raise CliError(f"{flag} is required")
    return value


def _write_text(out: Outputs, path, text: str):
    out.file(path).write_text(text, encoding="utf-8", newline="\n")


def _save_rgb(out: Outputs, rgb: np.ndarray, path):
    Image.fromarray(quantize8(rgb), mode="RGB").save(out.file(path), format="PNG")


def _setup(args):
    items = dataset(args)
    channels = items[0][1][0].shape[2]
    spec, params = codec_from(args, channels)
    form = form_from(args, spec, params, items)
    force = bool(args.force_unnormalized)
    return items, spec, params, form, force


# -------------------------------------------------------------------- commands


def cmd_fuse(args, out: Outputs):
    out_dir = Path(_require(args.out, "--out"))
    items, spec, params, form, force = _setup(args)
    results = pmap(lambda it: run_pipeline(spec, params, it[1], form, force=force), items, args.jobs)
    for (name, _), res in zip(items, results):
        save_image(res.fused, out.file(out_dir / f"{name}.png"))
        if args.export_weights:
            _export_weights(out, out_dir, name, res.weights, res.losses)
    log.info("fused %d items into %s", len(items), out_dir)


def _export_weights(out: Outputs, out_dir: Path, name: str, weights, losses):
    for m in range(weights.shape[-1]):
        for suffix in (f"_w{m}.png", f"_w{m}.f32"):
            out.file(out_dir / f"{name}{suffix}")
        out.file(out_dir / f"{name}_loss{m}.f32")
    export_weight_maps(weights, out_dir, name)
    export_loss_maps(losses, out_dir, name)
    for m in range(weights.shape[-1]):
        _save_rgb(out, render_heatmap(weights[:, :, m]), out_dir / f"{name}_w{m}_heat.png")


def cmd_weights(args, out: Outputs):
    out_dir = Path(_require(args.out, "--out"))
    items, spec, params, form, _ = _setup(args)
    results = pmap(lambda it: stage_one(spec, params, it[1], form), items, args.jobs)
    for (name, _), (losses, weights) in zip(items, results):
        _export_weights(out, out_dir, name, weights, losses)
    log.info("exported weights for %d items into %s", len(items), out_dir)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_eval(args, out: Outputs):
    csv_path = Path(_require(args.csv, "--csv"))
    items = load_items(_require(args.input, "input directory"))
    if args.fused:
        fused_dir = Path(args.fused)

        def work(it):
            path = fused_dir / f"{it[0]}.png"
            if not path.is_file():
                raise CliError(f"missing fused image {path}")
            return evaluate_all(load_image(path), it[1])
    else:
        spec, params = codec_from(args, items[0][1][0].shape[2])
        form = form_from(args, spec, params, items)

        def work(it):
            res = run_pipeline(spec, params, it[1], form, force=bool(args.force_unnormalized))
            return evaluate_all(res.fused, it[1])
    rows = pmap(work, items, args.jobs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["item", *CSV_COLUMNS])
    for (name, _), row in zip(items, rows):
        writer.writerow([name, *(_fmt(v) for v in row.values())])
    _write_text(out, csv_path, buf.getvalue())
    log.info("wrote metrics for %d items to %s", len(items), csv_path)


def cmd_train(args, out: Outputs):
    out_dir = Path(_require(args.out, "--out"))
    items = dataset(args)
    channels = items[0][1][0].shape[2]
    spec = CodecSpec("toynet", features=args.features, kernel=args.kernel, image_channels=channels)
    cfg = TrainConfig(args.lr, args.epochs, args.batch, args.seed)
    params = train_toy(spec, [srcs for _, srcs in items], cfg)
    path = out.file(out_dir / "params.ttdn")
    out.file(out_dir / "params.ttdn.spec.txt")
    save_params(params, spec, path)
    log.info("trained toy net on %d items -> %s", len(items), path)


def cmd_synth(args, out: Outputs):
    out_dir = Path(_require(args.out, "--out"))
    if out_dir.exists() and any(out_dir.iterdir()):
        raise CliError(f"output directory {out_dir} is not empty")
    out.mkdir(out_dir)
    specs = scene_specs(args.count, args.seed, args.size, args.density)
    try:
        write_dataset(out_dir, specs)
    finally:
        out.track_tree(out_dir)
    log.info("wrote %d scenes to %s", len(specs), out_dir)


def cmd_theory(args, out: Outputs):
    out_dir = Path(_require(args.out, "--out"))
    items, spec, params, form, force = _setup(args)
    data = [srcs for _, srcs in items]
    forms = [form] + [f for f in (WeightForm("rd"), WeightForm("static"), WeightForm("pc")) if f != form]
    reports = [geb_decomposition(data, spec, params, f, force=force, jobs=args.jobs) for f in forms]
    for r in reports:
        _write_text(out, out_dir / f"geb_{r.strategy.replace('/', '-')}.csv", r.to_csv())
    _write_text(out, out_dir / "geb_summary.txt", "\n".join(r.summary() for r in reports))
    rows = compare_strategies(data, spec, params, forms, norm=args.loss_norm, force_unnormalized=force,
                              jobs=args.jobs)
    _write_text(out, Path(args.csv) if args.csv else out_dir / "strategies.csv", strategies_csv(rows))
    strategy_figure([r.strategy for r in rows], [r.mean_loss for r in rows], [r.se_loss for r in rows],
                    out.file(out_dir / "strategies.png"))
    covariance_figure([r.strategy for r in reports], [r.pooled_cov for r in reports],
                      out.file(out_dir / "covariance.png"))
    log.info("theory report for %d items in %s", len(items), out_dir)


def ablation_forms(spec: CodecSpec, grad_channel: Optional[int]) -> list[WeightForm]:
    """Weight-form sweep followed by the normalization sweep of RD."""
    forms = [WeightForm(v) for v in ("rd", "plain", "sigmoid", "static", "pc")]
    if spec.backend == "toynet":
        forms.append(WeightForm("grad", grad_channel=grad_channel))
    forms += [WeightForm("rd", "prop"), WeightForm("rd", "none")]
    return forms


def cmd_ablate(args, out: Outputs):
    out_dir = Path(_require(args.out, "--out"))
    items = dataset(args)
    spec, params = codec_from(args, items[0][1][0].shape[2])
    data = [srcs for _, srcs in items]
    channel = args.grad_channel
    if spec.backend == "toynet" and channel is None:
        channel = select_gradient_channel(
            [[loss_gradients(spec, params, x).features for x in srcs] for srcs in data[:CALIBRATION_ITEMS]])
    # the unnormalized row exists to be forced through fusion
    rows = compare_strategies(data, spec, params, ablation_forms(spec, channel), norm=args.loss_norm,
                              force_unnormalized=True, jobs=args.jobs)
    _write_text(out, Path(args.csv) if args.csv else out_dir / "ablation.csv", strategies_csv(rows))
    strategy_figure([r.strategy for r in rows], [r.mean_loss for r in rows], [r.se_loss for r in rows],
                    out.file(out_dir / "ablation.png"), title="weight form and normalization ablation")
    log.info("ablation over %d items in %s", len(items), out_dir)


HANDLERS = {
    "fuse": cmd_fuse,
    "weights": cmd_weights,
    "eval": cmd_eval,
    "train": cmd_train,
    "synth": cmd_synth,
    "theory": cmd_theory,
    "ablate": cmd_ablate,
}


def _configure_logging():
    level = os.environ.get("TTD_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(f"TTD_LOG must be one of error, info, debug (got {level!r})")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(levels[level])
    log.propagate = False


def main(argv=None) -> int:
    out = Outputs()
    try:
        _configure_logging()
        args = resolve(build_parser().parse_args(argv))
        log.debug("resolved options: %s", vars(args))
        HANDLERS[args.command](args, out)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        out.rollback()
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"ttdfusion: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
