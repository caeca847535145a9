"""Command-line front end.

Subcommands: gen, extract, stats, pretrain, probe, sweep, distortion-curve.
Settings resolve as built-in defaults, then ``--config <json>``, then flags.
Every subcommand validates its inputs before writing any output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .contrastive import LossConfig
from .dataset import (
    DEFAULT_PATCH_SIZE,
    build_patch_pool,
    load_manifest,
    read_manifest_annotations,
    read_pool,
    write_pool,
)
from .errors import (
    DegenerateEmbeddingError,
    DegenerateLabelsError,
    ExtractionError,
    ParseError,
    ValidationError,
)
from .evaluation import (
    alpha_sweep,
    knn_probe,
    pool_normalization,
    probe_model,
    random_init_baseline,
    sweep_csv,
    train_test_split,
)
from .geometry import DEFAULT_CALIBRATION, distortion_curve, load_calibration, parse_scheme, scheme_name
from .model import (
    OBJECTIVES,
    AugmentationConfig,
    ModelConfig,
    TrainConfig,
    checkpoint_meta,
    encode,
    init_model,
    load_checkpoint,
    normalize,
    pretrain,
    save_checkpoint,
)
from .quality import pool_statistics, region_feature_summaries
from .synthgen import GeneratorConfig, generate_patch_pool, generate_scene_annotations, write_tally_csv

log = logging.getLogger("fisheye_supcon")

DEFAULTS = {
    "seed": 0,
    "scheme": "standard",
    "alpha": 0.5,
    "tau": 0.07,
    "epochs": 25,
    "batch_size": 64,
    "lr": 0.001,
    "weight_decay": 0.0001,
    "momentum": 0.9,
    "patch_size": DEFAULT_PATCH_SIZE[0],
    "objective": "combined",
    "representation_dim": 128,
    "test_fraction": 0.2,
    "probe_epochs": 300,
    "probe_lr": 0.5,
    "knn_k": 5,
    "samples": 100,
    "alphas": "0,0.25,0.5,0.75,1",
    "num_images": 300,
    "objects_min": 5,
    "objects_max": 10,
    "image_size": 128,
    "noise_std": 0.05,
    "jitter": 1.0,
}


class UsageError(Exception):
    """Bad combination of options that argparse cannot express."""


def _threads() -> Optional[int]:
    cap = os.environ.get("FEYE_THREADS")
    if not cap:
        return None
    try:
        return max(1, int(cap))
    except ValueError:
        raise ValidationError(f"FEYE_THREADS must be an integer, got {cap!r}") from None


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _check_output(path) -> None:
    parent = Path(path).parent
    if not parent.is_dir():
        raise ValidationError(f"output directory does not exist: {parent}")


def _calibration(opts):
    return load_calibration(_require_file(opts["cal"], "calibration file")) if opts.get("cal") else DEFAULT_CALIBRATION


def _train_config(opts) -> TrainConfig:
    return TrainConfig(
        epochs=int(opts["epochs"]),
        batch_size=int(opts["batch_size"]),
        lr=float(opts["lr"]),
        weight_decay=float(opts["weight_decay"]),
        momentum=float(opts["momentum"]),
        seed=int(opts["seed"]),
        objective=opts["objective"],
    )


def _test_fraction(opts) -> float:
    f = float(opts["test_fraction"])
    if not 0.0 < f < 1.0:
        raise ValidationError("test_fraction must lie in (0, 1)")
    return f


# ---------------------------------------------------------------- commands


def cmd_gen(opts) -> None:
    cfg = GeneratorConfig(
        seed=int(opts["seed"]),
        num_images=int(opts["num_images"]),
        objects_per_image=(int(opts["objects_min"]), int(opts["objects_max"])),
        calibration=_calibration(opts),
        noise_std=float(opts["noise_std"]),
        scheme=opts["scheme"],
        patch_size=int(opts["patch_size"]),
        image_size=int(opts["image_size"]),
        jitter=float(opts["jitter"]),
    )
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _, tally = generate_scene_annotations(cfg, out, render_images=not opts.get("no_images"))
    pool, _ = generate_patch_pool(cfg, out / "pool.fepp")
    write_tally_csv(tally, out / "tally.csv")
    (out / "generator.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("generated %d objects in %d images; pool written to %s", len(pool), cfg.num_images, out / "pool.fepp")


def cmd_extract(opts) -> None:
    manifest = load_manifest(_require_file(opts["manifest"], "manifest"))
    scheme = parse_scheme(opts["scheme"])
    size = int(opts["patch_size"])
    if size < 1:
        raise ValidationError("patch_size must be positive")
    _check_output(opts["out"])
    pool = build_patch_pool(manifest, scheme, (size, size), workers=_threads() or 1)
    write_pool(opts["out"], pool, manifest.num_classes, scheme.num_levels)
    log.info("wrote %d patches to %s", len(pool), opts["out"])


def cmd_stats(opts) -> None:
    manifest = load_manifest(_require_file(opts["manifest"], "manifest"))
    scheme = parse_scheme(opts["scheme"])
    cal = _calibration(opts)
    pool = read_pool(_require_file(opts["pool"], "pool file")) if opts.get("pool") else None
    anns = [a for per_image in read_manifest_annotations(manifest) for a in per_image]
    report = pool_statistics(anns, scheme, cal, manifest.class_names)
    regions = region_feature_summaries(pool.patches, pool.num_classes, _threads()) if pool is not None else None

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    names = manifest.class_names
    (out / "center_edge.csv").write_text(_csv(
        [(c, names[c], report.counts[c, 0], report.counts[c, 1:].sum()) for c in range(len(names))],
        ("class_id", "class_name", "center", "edge")), encoding="utf-8")
    (out / "distance_area.csv").write_text(_csv(
        [(int(c), _fmt(d), _fmt(a)) for c, d, a in zip(report.classes, report.distances, report.areas)],
        ("class_id", "distance", "area")), encoding="utf-8")
    edges = report.area_bin_edges
    (out / "area_histogram.csv").write_text(_csv(
        [(c, _fmt(edges[b]), _fmt(edges[b + 1]), report.area_histogram[c, b])
         for c in range(len(names)) for b in range(len(edges) - 1)],
        ("class_id", "bin_lo", "bin_hi", "count")), encoding="utf-8")
    (out / "distortion_curve.csv").write_text(_csv(
        [(_fmt(r), _fmt(d)) for r, d in zip(report.curve_rho, report.curve_d)], ("rho", "d")), encoding="utf-8")
    doc = {
        "scheme": scheme_name(scheme),
        "objects": int(report.counts.sum()),
        "center_fraction": report.center_fraction(),
        "center_edge": report.center_edge(),
        "calibration": cal.as_dict(),
    }
    if regions is not None:
        rows = []
        for r in regions:
            rows.append((r.class_id, r.center_count, r.edge_count,
                         _fmt(r.center.mean) if r.center else "", _fmt(r.center.std) if r.center else "",
                         _fmt(r.edge.mean) if r.edge else "", _fmt(r.edge.std) if r.edge else "",
                         _fmt(r.overlap) if r.overlap is not None else ""))
        (out / "brisque_regions.csv").write_text(_csv(rows, (
            "class_id", "center_count", "edge_count", "center_mean", "center_std", "edge_mean", "edge_std",
            "overlap")), encoding="utf-8")
        doc["brisque_overlap"] = {str(r.class_id): r.overlap for r in regions}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("statistics for %d objects written to %s", doc["objects"], out)


def cmd_pretrain(opts) -> None:
    pool = read_pool(_require_file(opts["pool"], "pool file"))
    loss_cfg = LossConfig(float(opts["tau"]), float(opts["alpha"]))
    run_cfg = _train_config(opts)
    frac = _test_fraction(opts)
    if not len(pool):
        raise ValidationError("pool is empty")
    h, w, ch = pool.patch_shape
    model_cfg = ModelConfig(input_dim=h * w * ch, representation_dim=int(opts["representation_dim"]))
    train, _ = train_test_split(pool.patches, run_cfg.seed, frac)
    _check_output(opts["out"])
    if opts.get("loss_csv"):
        _check_output(opts["loss_csv"])
    res = pretrain(train, model_cfg, loss_cfg, run_cfg)
    meta = checkpoint_meta(res, pool_normalization(train, run_cfg.augmentation))
    meta["split"] = {"seed": run_cfg.seed, "test_fraction": frac}
    meta["num_classes"] = pool.num_classes
    save_checkpoint(opts["out"], res.model, meta)
    if opts.get("loss_csv"):
        Path(opts["loss_csv"]).write_text(_csv(
            [(i + 1, _fmt(v)) for i, v in enumerate(res.epoch_losses)], ("epoch", "loss")), encoding="utf-8")
    log.info("final loss %.6f; checkpoint written to %s", res.epoch_losses[-1], opts["out"])


PROBE_COLUMNS = ("model", "alpha", "accuracy", "center_accuracy", "edge_accuracy", "gap", "knn_accuracy",
                 "alignment", "uniformity")


def cmd_probe(opts) -> None:
    pool = read_pool(_require_file(opts["pool"], "pool file"))
    if not opts.get("checkpoint") and not opts.get("baseline"):
        raise UsageError("probe needs --checkpoint and/or --baseline")
    ckpt = None
    if opts.get("checkpoint"):
        ckpt = load_checkpoint(_require_file(opts["checkpoint"], "checkpoint"))
    seed = int(opts["seed"])
    frac = _test_fraction(opts)
    if ckpt is not None and "split" in ckpt[1]["meta"] and not opts.get("_explicit_split"):
        seed = int(ckpt[1]["meta"]["split"]["seed"])
        frac = float(ckpt[1]["meta"]["split"]["test_fraction"])
    k = int(opts["knn_k"])
    if opts.get("out"):
        _check_output(opts["out"])
    train, test = train_test_split(pool.patches, seed, frac)
    kw = dict(epochs=int(opts["probe_epochs"]), lr=float(opts["probe_lr"]), num_classes=pool.num_classes)
    rows = []

    def row(name, model, norm, alpha, report, geom):
        x = np.stack([p.pixels for p in test]).astype(np.float64)
        r = encode(model, normalize(x, norm))
        knn = knn_probe(r, [p.semantic_class for p in test], k)
        per_class = [_fmt(report.per_class.get(c, float("nan"))) for c in range(pool.num_classes)]
        return [name, "" if alpha is None else _fmt(alpha), _fmt(report.accuracy), _fmt(report.center_accuracy),
                _fmt(report.edge_accuracy), _fmt(report.gap), _fmt(knn), _fmt(geom.alignment),
                _fmt(geom.uniformity), *per_class]

    h, w, ch = pool.patch_shape
    if opts.get("baseline"):
        model_cfg = ckpt[0].config if ckpt else ModelConfig(input_dim=h * w * ch,
                                                             representation_dim=int(opts["representation_dim"]))
        base_model = init_model(model_cfg, seed)
        norm = pool_normalization(train)
        report, geom = random_init_baseline(train, test, model_cfg, seed, **kw)
        rows.append(row("random-init", base_model, norm, None, report, geom))
    if ckpt is not None:
        model, trailer = ckpt
        aug = trailer["meta"].get("augmentation")
        norm = AugmentationConfig().with_stats(aug["mean"], aug["std"]) if aug else pool_normalization(train)
        alpha = trailer["meta"].get("alpha")
        report, geom = probe_model(model, train, test, norm, seed, alpha=alpha, **kw)
        rows.append(row("pretrained", model, norm, alpha, report, geom))
    header = list(PROBE_COLUMNS) + [f"class{c}_accuracy" for c in range(pool.num_classes)]
    text = _csv(rows, header)
    if opts.get("out"):
        Path(opts["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_sweep(opts) -> None:
    pool = read_pool(_require_file(opts["pool"], "pool file"))
    try:
        alphas = [float(a) for a in str(opts["alphas"]).split(",") if a.strip()]
    except ValueError:
        raise ValidationError(f"bad --alphas list {opts['alphas']!r}") from None
    if not alphas:
        raise ValidationError("--alphas is empty")
    for a in alphas:
        LossConfig(float(opts["tau"]), a)
    run_cfg = _train_config(opts)
    frac = _test_fraction(opts)
    if opts.get("out"):
        _check_output(opts["out"])
    h, w, ch = pool.patch_shape
    model_cfg = ModelConfig(input_dim=h * w * ch, representation_dim=int(opts["representation_dim"]))
    train, test = train_test_split(pool.patches, run_cfg.seed, frac)
    rows = alpha_sweep(train, test, alphas, run_cfg, float(opts["tau"]), model_cfg,
                       num_classes=pool.num_classes, probe_epochs=int(opts["probe_epochs"]),
                       probe_lr=float(opts["probe_lr"]))
    text = sweep_csv(rows)
    if opts.get("out"):
        Path(opts["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_distortion_curve(opts) -> None:
    cal = _calibration(opts)
    rho, d = distortion_curve(cal, int(opts["samples"]))
    if opts.get("out"):
        _check_output(opts["out"])
    text = _csv([(_fmt(r), _fmt(v)) for r, v in zip(rho, d)], ("rho", "d"))
    if opts.get("out"):
        Path(opts["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


COMMANDS = {
    "gen": cmd_gen,
    "extract": cmd_extract,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "distortion-curve": cmd_distortion_curve,
}


# ---------------------------------------------------------------- parsing


def _add_training(p):
    p.add_argument("--alpha", type=float, help="weight of the distortion-class loss (default 0.5)")
    p.add_argument("--tau", type=float, help="temperature (default 0.07)")
    p.add_argument("--epochs", type=int, help="default 25")
    p.add_argument("--batch-size", type=int, help="patches per batch before view doubling (default 64)")
    p.add_argument("--lr", type=float, help="default 0.001")
    p.add_argument("--weight-decay", type=float, help="default 0.0001")
    p.add_argument("--momentum", type=float, help="default 0.9")
    p.add_argument("--objective", choices=OBJECTIVES, help="loss used for pre-training (default combined)")
    p.add_argument("--representation-dim", type=int, help="encoder output width (default 128; 512 for the wide preset)")
    p.add_argument("--test-fraction", type=float, help="held-out share of the pool (default 0.2)")


def _add_probe(p):
    p.add_argument("--probe-epochs", type=int, help="full-batch steps for the linear probe (default 300)")
    p.add_argument("--probe-lr", type=float, help="linear probe learning rate (default 0.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feye", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON file with option overrides")
        p.add_argument("--seed", type=int, help="global seed (default 0)")
        p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
        return p

    p = add("gen", "generate a synthetic fisheye object dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-images", type=int)
    p.add_argument("--objects-min", type=int)
    p.add_argument("--objects-max", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--jitter", type=float, help="nuisance variation strength in [0, 1] (default 1)")
    p.add_argument("--scheme", help="standard | large | small | levels:<l>")
    p.add_argument("--cal", help="calibration file (a0, a2, a3, a4)")
    p.add_argument("--no-images", action="store_true", help="write annotations only")

    p = add("extract", "extract labeled object patches from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scheme")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--out", required=True, help="pool file to write")

    p = add("stats", "dataset statistics and naturalness-feature overlap")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pool", help="pool file for naturalness features")
    p.add_argument("--scheme")
    p.add_argument("--cal")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pretrain", "contrastive pre-training on a patch pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--loss-csv", help="per-epoch loss CSV")
    _add_training(p)

    p = add("probe", "linear and kNN probes on frozen representations")
    p.add_argument("--pool", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_true", help="also probe a random-init encoder")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--representation-dim", type=int)
    p.add_argument("--knn-k", type=int)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    _add_probe(p)

    p = add("sweep", "train and probe one model per alpha")
    p.add_argument("--pool", required=True)
    p.add_argument("--alphas", help="comma-separated list (default 0,0.25,0.5,0.75,1)")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    _add_training(p)
    _add_probe(p)

    p = add("distortion-curve", "tabulate the distortion polynomial")
    p.add_argument("--cal")
    p.add_argument("--samples", type=int)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    return parser


def _option_names(parser: argparse.ArgumentParser) -> set[str]:
    names = set(DEFAULTS)
    for sub in parser._subparsers._group_actions[0].choices.values():
        names.update(a.dest for a in sub._actions if a.dest not in ("help", "config"))
    return names


def resolve_options(args: argparse.Namespace, known: Optional[set[str]] = None) -> dict:
    opts = dict(DEFAULTS)
    if args.config:
        path = _require_file(args.config, "config file")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno, source=str(path)) from None
        if not isinstance(raw, dict):
            raise ValidationError("config file must hold a JSON object")
        raw = {k.replace("-", "_"): v for k, v in raw.items()}
        unknown = sorted(set(raw) - known) if known is not None else []
        if unknown:
            raise ValidationError(f"unknown keys in config file {path}: {unknown}")
        opts.update(raw)
        if "seed" in raw or "test_fraction" in raw:
            opts["_explicit_split"] = True
    flags = {k: v for k, v in vars(args).items() if v is not None and v is not False}
    if "seed" in flags or "test_fraction" in flags:
        opts["_explicit_split"] = True
    opts.update(flags)
    return opts


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = resolve_options(args, _option_names(parser))
        COMMANDS[args.command](opts)
    except UsageError as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"feye {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ParseError, ExtractionError, DegenerateLabelsError, DegenerateEmbeddingError,
            OSError) as exc:
        print(f"feye {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
