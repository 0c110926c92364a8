"""Command-line front end.

Every command accepts ``--config FILE`` (versioned key=value text) and one
long flag per configuration key, e.g. ``--train.learningRate 0.01``.  The
resolved configuration is written next to each command's outputs.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .cnn import write_curve
from .config import KEYS, PRESETS, RunConfig, load_config
from .datasets import generate_synthetic, ingest_dataset
from .errors import ConfigError, FormatError, N4Error, ShapeError
from .evaluation import (MatchConfig, pixel_precision_recall_dataset, score_dataset,
                         sweep_tolerance, write_curve_csv, write_report_csv, write_summary)
from .imagecore import read_raw, write_png, write_raw
from .pipeline import (InferenceConfig, apply_committee, load_model, rebuild_dictionary,
                       save_model, train_baseline, train_field)

log = logging.getLogger("n4fields")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="versioned key=value configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting configuration")
    g = p.add_argument_group("configuration keys")
    for key in KEYS:
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def _add_data_flags(p, split="train"):
    p.add_argument("--data", type=Path, required=True, help="dataset root directory")
    p.add_argument("--layout", choices=("bsds", "flat"), default="bsds")
    p.add_argument("--split", default=split)


def _add_out_flag(p):
    p.add_argument("--out", type=Path, help="output directory (default: run.outputDir/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="n4fields", description="Patch-code nearest-neighbour image transforms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--kind", choices=("polygons", "vessels"), default="polygons")
    p.add_argument("--count", type=int, default=30, help="training images")
    p.add_argument("--val-count", type=int, default=10)
    p.add_argument("--test-count", type=int, default=None, help="default: same as --count")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a field model")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="model bundle directory; a committee writes "
                   "one member<k> bundle per seed inside it")

    p = sub.add_parser("baseline", help="train a CNN baseline (central or patch)")
    _add_data_flags(p)
    _add_config_flags(p)
    _add_out_flag(p)

    p = sub.add_parser("build-dict", help="rebuild a model's dictionary from a dataset")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--model", type=Path, required=True)
    _add_out_flag(p)

    p = sub.add_parser("apply", help="compute response maps")
    _add_data_flags(p, "test")
    _add_config_flags(p)
    p.add_argument("--model", type=Path, action="append", required=True,
                   help="model bundle or committee directory; repeat to form a committee")
    _add_out_flag(p)

    p = sub.add_parser("eval", help="score response maps against ground truth")
    _add_data_flags(p, "test")
    _add_config_flags(p)
    p.add_argument("--pred", type=Path, required=True, help="directory of .n4im responses")
    _add_out_flag(p)

    p = sub.add_parser("sweep-tolerance", help="scores at several matching tolerances")
    _add_data_flags(p, "test")
    _add_config_flags(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--tolerances", default="0.0025,0.005,0.0075,0.01")
    _add_out_flag(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "preset", None):
        base = PRESETS[args.preset]()
        if args.config:
            raise UsageError("--preset and --config are mutually exclusive")
        cfg = base
    overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items()
                 if k.startswith("cfg:") and v is not None}
    return cfg.update(overrides)


def _out(args, cfg: RunConfig) -> Path:
    if args.out is None:
        args.out = Path(cfg["run.outputDir"]) / args.command
    return args.out


def _load_models(paths) -> list:
    """Bundles, with committee directories expanded to their members."""
    models = []
    for path in paths:
        members = sorted(path.glob("member*/manifest.txt"))
        if not (path / "manifest.txt").exists() and members:
            models.extend(load_model(m.parent) for m in members)
        else:
            models.append(load_model(path))
    return models


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")


def _dataset(args):
    manifest = ingest_dataset(args.data, args.layout).require_valid()
    return manifest.load(args.split)


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    counts = {"train": args.count, "val": args.val_count,
              "test": args.count if args.test_count is None else args.test_count}
    manifest = generate_synthetic(args.kind, {k: v for k, v in counts.items() if v > 0},
                                  args.size, args.seed, args.out)
    manifest.require_valid()
    for split, entries in sorted(manifest.splits.items()):
        print(f"{split}: {len(entries)} images")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = _dataset(args)
    out = _out(args, cfg)
    _echo(cfg, out)
    size = cfg["infer.committee"]
    # committee members differ by seed only
    for k in range(size):
        target = out if size == 1 else out / f"member{k}"
        model, curve = train_field(
            data, cfg.geometry(), cfg.stack(), cfg.train_config(), cfg["run.encoding"],
            cfg["dict.size"], cfg["run.seed"] + k, cfg["run.codeDim"], cfg["train.samples"],
            cfg["train.codecSamples"], leaf_size=cfg["dict.leafSize"])
        save_model(model, target)
        write_curve(curve, target / "curve.csv")
        print(f"model written to {target} (final val loss {curve[-1].val_loss:.5f})")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = resolve_config(args)
    data = _dataset(args)
    _echo(cfg, _out(args, cfg))
    model, curve = train_baseline(data, cfg["baseline.mode"], cfg.geometry(), cfg.stack(),
                                  cfg.train_config(), cfg["run.seed"], cfg["train.samples"])
    save_model(model, args.out)
    write_curve(curve, args.out / "curve.csv")
    print(f"{cfg['baseline.mode']} baseline written to {args.out}")
    return EXIT_OK


def cmd_build_dict(args) -> int:
    cfg = resolve_config(args)
    data = _dataset(args)
    model = load_model(args.model)
    _echo(cfg, _out(args, cfg))
    model = rebuild_dictionary(model, data, cfg["dict.size"], cfg["run.seed"],
                               cfg["dict.leafSize"])
    save_model(model, args.out)
    print(f"dictionary of {model.dictionary.size} entries written to {args.out}")
    return EXIT_OK


def cmd_apply(args) -> int:
    cfg = resolve_config(args)
    data = _dataset(args)
    models = _load_models(args.model)
    inf = InferenceConfig(models, cfg["infer.scales"], cfg.search_config(), cfg["infer.stride"])
    _echo(cfg, _out(args, cfg))
    for sample in data:
        response = apply_committee(inf, sample.image)
        write_raw(args.out / f"{sample.name}.n4im", response.astype(np.float32))
        write_png(args.out / f"{sample.name}.png", response)
    print(f"{len(data)} response maps written to {args.out}")
    return EXIT_OK


def _predictions(args, data):
    preds = []
    for sample in data:
        path = args.pred / f"{sample.name}.n4im"
        if not path.exists():
            raise FormatError(f"missing prediction {path}")
        r = read_raw(path)[0]
        if r.shape != sample.image.shape[1:]:
            raise ShapeError(f"{path}: shape {r.shape} differs from image")
        preds.append(r)
    return preds


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    data = _dataset(args)
    preds = _predictions(args, data)
    _echo(cfg, _out(args, cfg))
    report = score_dataset(preds, [s.annotations for s in data], cfg.match_config())
    write_report_csv(report, args.out / "report.csv")
    summary = dict(report.summary())
    if any(s.roi is not None for s in data):
        curve = pixel_precision_recall_dataset(
            preds, [s.target() >= 0.5 for s in data], [s.roi for s in data],
            cfg.match_config().thresholds)
        write_curve_csv(curve, args.out / "pixel_pr.csv")
        summary["pixelAP"] = curve.ap
    write_summary(summary, args.out / "summary.txt")
    for k, v in summary.items():
        print(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    try:
        tolerances = [float(t) for t in args.tolerances.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--tolerances: {exc}") from None
    data = _dataset(args)
    preds = _predictions(args, data)
    _echo(cfg, _out(args, cfg))
    reports = sweep_tolerance(preds, [s.annotations for s in data], tolerances,
                              cfg.match_config().thresholds)
    for tol in tolerances:
        report = reports[tol]
        write_report_csv(report, args.out / f"tolerance_{tol:.4f}.csv")
        s = report.summary()
        print(f"tolerance={tol:.4f} ODS={s['ODS']:.4f} OIS={s['OIS']:.4f} AP={s['AP']:.4f}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "baseline": cmd_baseline,
    "build-dict": cmd_build_dict, "apply": cmd_apply, "eval": cmd_eval,
    "sweep-tolerance": cmd_sweep,
}


def _thread_limit():
    raw = os.environ.get("N4_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"N4_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("N4_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (N4Error, OSError, RuntimeError, MemoryError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
