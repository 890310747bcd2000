"""Command-line entry point.

    ganaug phantom      --out DIR [--n-pos N] [--n-neg N] [--size S] [--seed N]
    ganaug extract      --image F --boxes CSV --out DIR [--mask F] [--patch-size S] [--n-neg N]
    ganaug train-gan    --data DIR --out DIR [--epochs N] [--seed N]
    ganaug synth        --ckpt F --n N --out DIR [--seed N]
    ganaug eval-matrix  --config F --out DIR [--data DIR] [--jobs N]
    ganaug report       --results CSV --out DIR

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from ganaug import __version__
from ganaug.config import RunConfig, dump_config, load_config, override
from ganaug.data import AnnotatedImage, Label, PatchPool, generate_phantom_dataset, histogram_normalize
from ganaug.errors import ConfigError, GanAugError, InvalidInputError
from ganaug.storage import load_patch_directory, read_pgm, save_patch_directory

log = logging.getLogger("ganaug")

RESOLVED_CONFIG = "config.resolved.toml"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _setup_logging(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger("ganaug")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fh = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(sh)


def _finish(cfg: RunConfig, out_dir: Path) -> None:
    # the copy lives inside out_dir, so its own location is recorded as "."
    # and two runs into different directories stay byte-comparable
    dump_config(override(cfg, "paths", out_dir="."), out_dir / RESOLVED_CONFIG)


# ---------------------------------------------------------------- subcommands


def cmd_phantom(args) -> int:
    cfg = load_config(args.config)
    cfg = override(cfg, "phantom", image_size=args.size, n_positive=args.n_pos, n_negative=args.n_neg, seed=args.seed)
    out = Path(args.out)
    _setup_logging(out)
    pool = generate_phantom_dataset(cfg.phantom)
    save_patch_directory(pool, out)
    log.info("wrote %d patches (%s) to %s", len(pool), dict((k.value, v) for k, v in pool.class_counts.items()), out)
    _finish(cfg, out)
    return 0


def _read_boxes(path) -> list[tuple[int, int, int, int]]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"boxes file not found: {p}")
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("x0", "y0", "x1", "y1"):
            raise ConfigError(f"{p}: header must be x0,y0,x1,y1")
        return [(int(r["x0"]), int(r["y0"]), int(r["x1"]), int(r["y1"])) for r in reader]


def _read_image(path, normalize: bool) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"image not found: {p}")
    img = np.load(p) if p.suffix == ".npy" else read_pgm(p)
    return histogram_normalize(img) if normalize else np.clip(img, 0.0, 1.0)


def cmd_extract(args) -> int:
    from ganaug.data import extract_patches

    out = Path(args.out)
    _setup_logging(out)
    pixels = _read_image(args.image, not args.no_normalize)
    mask = None
    if args.mask:
        mask = _read_image(args.mask, normalize=False) > 0.5
    image = AnnotatedImage(pixels, tuple(_read_boxes(args.boxes)), mask, image_id=Path(args.image).stem)
    pool = extract_patches(image, args.patch_size, args.n_neg, args.seed)
    save_patch_directory(pool, out)
    log.info("extracted %d patches to %s", len(pool), out)
    _finish(load_config(None), out)
    return 0


def cmd_train_gan(args) -> int:
    from ganaug.gan import train_gan
    from ganaug.models import save_checkpoint

    cfg = load_config(args.config)
    cfg = override(cfg, "gan", epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
                   sample_grid_every=args.sample_every)
    out = Path(args.out)
    data = args.data or cfg.paths.data_dir
    cfg = override(cfg, "paths", data_dir=data or None)
    _setup_logging(out)
    if data:
        pool = load_patch_directory(data).with_label(Label.MASS)
    else:
        log.info("no --data given; generating phantom masses from [phantom]")
        pool = generate_phantom_dataset(cfg.phantom).with_label(Label.MASS)
    if not len(pool):
        raise InvalidInputError(f"no Mass patches found in {data or 'phantom data'}")
    size = pool.image_size
    result = train_gan(cfg.gan, pool, cfg.generator_spec(size), cfg.discriminator_spec(size), out_dir=out)
    save_checkpoint(result.generator, out / "generator.ckpt")
    save_checkpoint(result.discriminator, out / "discriminator.ckpt")
    last = result.log[-1]
    log.info("done: loss_d=%.4f loss_g=%.4f D(x)=%.3f D(G(z))=%.3f", last.loss_d, last.loss_g,
             last.d_real_mean, last.d_fake_mean)
    _finish(override(cfg, "paths", generator_checkpoint="generator.ckpt"), out)
    return 0


def cmd_synth(args) -> int:
    from ganaug.gan import synthesize
    from ganaug.models import load_checkpoint

    ckpt_path = Path(args.ckpt)
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    out = Path(args.out)
    _setup_logging(out)
    pool = synthesize(load_checkpoint(ckpt_path), args.n, args.seed)
    save_patch_directory(pool, out)
    log.info("wrote %d synthetic patches to %s", len(pool), out)
    _finish(override(load_config(None), "paths", generator_checkpoint=str(ckpt_path)), out)
    return 0


def cmd_eval_matrix(args) -> int:
    from ganaug.evaluation import emit_report, run_matrix

    cfg = load_config(args.config)
    cfg = override(cfg, "matrix", master_seed=args.seed)
    out = Path(args.out or cfg.paths.out_dir)
    data = args.data or cfg.paths.data_dir
    cfg = override(cfg, "paths", data_dir=data or None)
    _setup_logging(out)
    pool = load_patch_directory(data) if data else generate_phantom_dataset(cfg.phantom)
    log.info("matrix over %s", pool)
    table = run_matrix(cfg.experiment(), pool, jobs=args.jobs)
    emit_report(table, out)
    _finish(cfg, out)
    return 0


def cmd_report(args) -> int:
    from ganaug.evaluation import emit_report, read_results

    path = Path(args.results)
    if not path.is_file():
        raise ConfigError(f"results file not found: {path}")
    out = Path(args.out)
    _setup_logging(out)
    emit_report(read_results(path), out)
    _finish(load_config(None), out)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ganaug", description="DCGAN minority-class augmentation experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a procedural mass/normal patch directory")
    s.add_argument("--config", help="TOML run config; flags override its [phantom] values")
    s.add_argument("--out", required=True, help="output patch directory")
    s.add_argument("--n-pos", type=int, help="number of Mass patches")
    s.add_argument("--n-neg", type=int, help="number of Normal patches")
    s.add_argument("--size", type=int, help="patch side length (32, 64 or 128)")
    s.add_argument("--seed", type=int, help="generator seed")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("extract", help="cut mass and normal patches from one annotated image")
    s.add_argument("--image", required=True, help="8-bit PGM or raw .npy image")
    s.add_argument("--boxes", required=True, help="CSV of mass boxes with header x0,y0,x1,y1 (half-open)")
    s.add_argument("--mask", help="PGM tissue mask (bright = breast tissue); default all tissue")
    s.add_argument("--out", required=True, help="output patch directory")
    s.add_argument("--patch-size", type=int, default=128, help="patch side length (default 128)")
    s.add_argument("--n-neg", type=int, default=0, help="number of Normal patches to sample (default 0)")
    s.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    s.add_argument("--no-normalize", action="store_true", help="skip percentile-clip histogram normalization")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-gan", help="train the DCGAN on the Mass patches of a directory")
    s.add_argument("--config", help="TOML run config ([gan], [models], [phantom], [paths])")
    s.add_argument("--data", help="patch directory; default [paths].data_dir, else phantom data")
    s.add_argument("--out", required=True, help="output directory for checkpoints, log and sample grids")
    s.add_argument("--epochs", type=int, help="training epochs")
    s.add_argument("--seed", type=int, help="training seed")
    s.add_argument("--batch-size", type=int, help="mini-batch size")
    s.add_argument("--sample-every", type=int, help="write an 8x8 sample grid every N epochs (0 = never)")
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("synth", help="draw synthetic Mass patches from a generator checkpoint")
    s.add_argument("--ckpt", required=True, help="generator checkpoint file")
    s.add_argument("--n", type=int, required=True, help="number of patches")
    s.add_argument("--seed", type=int, default=0, help="latent sampling seed (default 0)")
    s.add_argument("--out", required=True, help="output patch directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval-matrix", help="run the strategy x k x repetition classification matrix")
    s.add_argument("--config", required=True, help="TOML run config")
    s.add_argument("--data", help="patch directory; default [paths].data_dir, else phantom data")
    s.add_argument("--out", help="output directory; default [paths].out_dir")
    s.add_argument("--seed", type=int, help="override [matrix].master_seed")
    s.add_argument("--jobs", type=int, default=1, help="parallel matrix cells (default 1)")
    s.set_defaults(func=cmd_eval_matrix)

    s = sub.add_parser("report", help="rebuild summary.csv and the F1 plot from results.csv")
    s.add_argument("--results", required=True, help="results.csv from eval-matrix")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage() + "ganaug: error: a subcommand is required")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ganaug {args.command}: {exc}", file=sys.stderr)
        return 1
    except (GanAugError, OSError, RuntimeError, ValueError) as exc:
        print(f"ganaug {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
