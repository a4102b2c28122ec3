"""``tipatch`` command line.

Exit codes: 0 success, 1 usage error, 2 data error (bad input file, failed
check).  Machine-readable results go to stdout; the effective config, seed
and progress go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .camsim import CamPipeline, DistanceProfile, distance_curve, simulate, wallpaper_gain
from .config import ConfigError, config_hash, load_config
from .evalkit import (
    EvalProtocol,
    EvalReport,
    compare_report,
    comparison_csv,
    evaluate,
    load_video_dir,
    save_dataset,
    synth_dataset,
)
from .imagery import (
    ImageFormatError,
    PatchFormatError,
    Placement,
    load_dir,
    load_image,
    load_patch,
    rng_stream,
    save_image,
    save_patch,
)
from .metrics import get_metric, grad_check
from .objective import LossWeights, default_palette, load_palette
from .patch_ops import TileSpec, apply_patch, tile_patch
from .trainer import VARIANT_NAMES, TrainConfig, get_variant, train, train_all_variants


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _announce(cfg: dict, seed: int) -> str:
    h = config_hash(cfg)
    _log(f"tipatch {__version__} seed={seed} config_hash={h}")
    _log("config: " + json.dumps(cfg, sort_keys=True))
    return h


def _provenance(cfg: dict, seed: int) -> dict:
    return {"seed": seed, "config_hash": config_hash(cfg), "tool_version": __version__}


def _comments(prov: dict) -> list[str]:
    return [f"tipatch {prov['tool_version']} seed={prov['seed']} config_hash={prov['config_hash']}"]


def _metric(cfg):
    return get_metric(cfg["metric"]["name"], cfg["metric"]["weights"])


def _palette(cfg):
    path = cfg["losses"]["palette_path"]
    return load_palette(path) if path else default_palette()


def _train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        patch_size=t["patch_size"], batch_size=t["batch_size"], iterations=t["iterations"],
        step=t["step"], optimizer=t["optimizer"], cosine=t["cosine"], seed=t["seed"],
        weights=LossWeights(cfg["losses"]["lambda_tv"], cfg["losses"]["lambda_nps"]),
        relight_max_delta=t["relight_max_delta"], val_every=t["val_every"], threads=t["threads"],
    )


def _parse_region(text):
    if text is None or text == "full":
        return None
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise UsageError("--region must be 'full' or x0,y0,w,h")
    return tuple(parts)


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = load_config(args.config, {
        "metric.name": args.metric, "metric.weights": args.weights,
        "train.variant": args.variant, "train.iterations": args.iters, "train.seed": args.seed,
        "train.patch_size": args.patch_size, "train.batch_size": args.batch_size,
        "train.step": args.step, "train.optimizer": args.optimizer, "train.threads": args.threads,
    })
    seed = cfg["train"]["seed"]
    _announce(cfg, seed)
    metric = _metric(cfg)
    try:
        vc = get_variant(cfg["train"]["variant"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tc = _train_config(cfg)
    data = load_dir(args.data)
    val = load_dir(args.val) if args.val else data

    def progress(row):
        if row["val_gain"] is not None:
            _log(f"iter {row['iter']}: total={row['total']:.5f} val_gain={row['val_gain']:.4f}")

    patch, log = train(data, val, metric, vc, tc, _palette(cfg), progress)
    prov = _provenance(cfg, seed)
    patch = patch.with_pixels(patch.pixels, **prov, config=cfg)
    save_patch(patch, args.output)
    log_path = Path(args.log) if args.log else Path(str(args.output) + ".log.csv")
    log_path.write_text(log.to_csv(_comments(prov)))
    if cfg["io"]["figures"] and log.rows:
        from .plots import plot_train_log
        plot_train_log(log.rows, log_path.with_suffix(".png"), vc.name)
    print(json.dumps({"patch": str(args.output), "log": str(log_path),
                      "best_iteration": log.best_iteration, "best_val_gain": log.best_val_gain}))
    return 0


def cmd_train_all(args) -> int:
    cfg = load_config(args.config, {
        "metric.name": args.metric, "metric.weights": args.weights,
        "train.iterations": args.iters, "train.seed": args.seed,
        "train.patch_size": args.patch_size, "train.batch_size": args.batch_size,
        "train.threads": args.threads,
    })
    seed = cfg["train"]["seed"]
    _announce(cfg, seed)
    metric = _metric(cfg)
    data = load_dir(args.data)
    val = load_dir(args.val) if args.val else data
    sets = {"val": val}
    for spec in args.test or []:
        name, _, path = spec.partition("=")
        if not path:
            raise UsageError(f"--test expects name=dir, got {spec!r}")
        sets[name] = load_dir(path)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    patches, logs, reports, table = train_all_variants(
        data, val, metric, _train_config(cfg), sets, _palette(cfg), cfg["eval"]["seed"])
    prov = _provenance(cfg, seed)
    for name, p in patches.items():
        slug = get_variant(name).slug
        save_patch(p.with_pixels(p.pixels, **prov, config=cfg), out / f"{slug}.tipf")
        (out / f"{slug}.log.csv").write_text(logs[name].to_csv(_comments(prov)))
        for (v, ds), rep in reports.items():
            if v == name:
                rep.meta.update(prov)
                rep.save(out / f"{slug}.{ds}.report.json")
    _write_json({**table, "provenance": prov}, out / "comparison.json")
    (out / "comparison.csv").write_text("".join(f"# {c}\n" for c in _comments(prov))
                                        + comparison_csv(table))
    if cfg["io"]["figures"]:
        from .plots import plot_comparison, plot_patches
        plot_comparison(table, out / "comparison.png")
        plot_patches(patches, out / "patches.png")
    sys.stdout.write(comparison_csv(table))
    return 0


def _protocol(cfg, patch) -> EvalProtocol:
    e = cfg["eval"]
    rot = e["rotation"]
    if rot is None:
        variant = patch.meta.get("variant")
        rot = get_variant(variant).use_rotation if variant else False
    tile = TileSpec(_parse_region(e["tile_region"]), e["tile_gap"], e["crop_partial"])
    return EvalProtocol(e["protocol"], bool(rot), e["seed"],
                        CamPipeline.from_json(cfg["camsim"]["stages"]), tile)


def cmd_eval(args) -> int:
    rotation = {"on": True, "off": False, "auto": None}[args.rotation] if args.rotation else None
    cfg = load_config(args.config, {
        "metric.name": args.metric, "metric.weights": args.weights,
        "eval.protocol": args.protocol, "eval.seed": args.seed, "eval.rotation": rotation,
        "eval.tile_region": args.region,
    })
    seed = cfg["eval"]["seed"]
    _announce(cfg, seed)
    metric = _metric(cfg)
    patch = load_patch(args.patch)
    proto = _protocol(cfg, patch)
    data = load_video_dir(args.data) if proto.mode == "video-fixed" else load_dir(args.data)
    report = evaluate(metric, data, patch, proto,
                      meta={**_provenance(cfg, seed), "config": cfg,
                            "variant": patch.meta.get("variant", Path(args.patch).stem),
                            "dataset": Path(args.data).name})
    report.save(args.output)
    print(json.dumps({"report": str(args.output), "n": report.n, "mean": report.mean,
                      "ci95": report.ci95}))
    return 0


def cmd_apply(args) -> int:
    cfg = load_config(args.config)
    _announce(cfg, 0)
    img = load_image(args.image)
    patch = load_patch(args.patch)
    out = apply_patch(img, patch, Placement(args.x, args.y, args.rot))
    save_image(out, args.output, _comments(_provenance(cfg, 0)))
    return 0


def cmd_tile(args) -> int:
    cfg = load_config(args.config)
    _announce(cfg, 0)
    img = load_image(args.image)
    patch = load_patch(args.patch)
    spec = TileSpec(_parse_region(args.region), args.gap, not args.no_crop)
    save_image(tile_patch(img, patch, spec), args.output, _comments(_provenance(cfg, 0)))
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.pipeline if args.pipeline else None, {"eval.seed": args.seed,
                                                                "metric.name": args.metric})
    seed = cfg["eval"]["seed"]
    _announce(cfg, seed)
    pipe = CamPipeline.from_json(cfg["camsim"]["stages"])
    img = load_image(args.image)
    prov = _provenance(cfg, seed)
    result = {}
    if args.output:
        save_image(simulate(img, pipe, rng_stream(seed, "camsim")), args.output, _comments(prov))
        result["image"] = str(args.output)
    if args.patch:
        metric = _metric(cfg)
        patch = load_patch(args.patch)
        result["wallpaper_gain"] = wallpaper_gain(img, patch, pipe, metric, seed)
        curve = distance_curve(img, patch, pipe, metric,
                               DistanceProfile(cfg["camsim"]["distances"]), seed)
        result["distance_curve"] = curve
        if args.figure:
            from .plots import plot_distance_curve
            plot_distance_curve(curve, args.figure)
    print(json.dumps({**result, **prov}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, {"metric.name": args.metric, "metric.weights": args.weights})
    _announce(cfg, args.seed)
    metric = _metric(cfg)
    size = args.size or max(metric.descriptor.min_size, 16)
    img = rng_stream(args.seed, "gradcheck-image").uniform(0.0, 1.0, (3, size, size))
    err = grad_check(metric, img, args.probes, args.step, args.seed)
    ok = bool(err <= args.tol)
    print(json.dumps({"metric": metric.id, "max_rel_error": float(err), "tolerance": args.tol, "ok": ok}))
    return 0 if ok else 2


def cmd_synth(args) -> int:
    cfg = load_config(None)
    _announce(cfg, args.seed)
    images = synth_dataset(args.n, args.height, args.width, args.seed)
    prov = {"seed": args.seed, "tool_version": __version__,
            "config_hash": config_hash({"synth": [args.n, args.height, args.width]})}
    save_dataset(images, args.output, _comments(prov))
    print(json.dumps({"dir": str(args.output), "n": args.n}))
    return 0


def cmd_report(args) -> int:
    reports = [EvalReport.load(p) for p in args.reports]
    cfg = load_config(None)
    _announce(cfg, 0)
    table = compare_report(reports, VARIANT_NAMES)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(table, out / "comparison.json")
    (out / "comparison.csv").write_text(comparison_csv(table))
    if not args.no_figures:
        from .plots import plot_comparison
        plot_comparison(table, out / "comparison.png")
        for log in args.logs or []:
            from .plots import plot_train_log
            plot_train_log(_read_log(log), out / (Path(log).name.split(".")[0] + ".log.png"),
                           Path(log).stem)
    sys.stdout.write(comparison_csv(table))
    return 0


def _read_log(path) -> list[dict]:
    import csv
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        if r["attack"] == "":
            continue
        rows.append({"iter": int(r["iter"]),
                     **{k: float(r[k]) for k in ("attack", "tv", "nps", "total")},
                     "val_gain": float(r["val_gain"]) if r["val_gain"] else None})
    return rows


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tipatch", description="Tiled adversarial patches against NR quality metrics.")
    p.add_argument("--version", action="version", version=f"tipatch {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def metric_flags(sp):
        sp.add_argument("--metric", choices=["proxy", "tinycnn"])
        sp.add_argument("--weights", help="tinycnn weight file (TIPF)")
        sp.add_argument("--config", help="JSON run config")

    sp = sub.add_parser("train", help="train one patch variant")
    metric_flags(sp)
    sp.add_argument("--variant", help=f"one of: {', '.join(VARIANT_NAMES)} (slugs accepted)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--val")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--step", type=float)
    sp.add_argument("--optimizer", choices=["sign", "adam"])
    sp.add_argument("--threads", type=int)
    sp.add_argument("--log", help="training log CSV (default <output>.log.csv)")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("train-all", help="train and compare all eight variants")
    metric_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--val")
    sp.add_argument("--test", action="append", help="name=dir, repeatable")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("-o", "--output", required=True, help="output directory")
    sp.set_defaults(func=cmd_train_all)

    sp = sub.add_parser("eval", help="evaluate a patch on a dataset")
    metric_flags(sp)
    sp.add_argument("--patch", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--protocol", choices=["image-random", "video-fixed", "tiled", "wallpaper"])
    sp.add_argument("--rotation", choices=["auto", "on", "off"])
    sp.add_argument("--region", help="tile region: full or x0,y0,w,h")
    sp.add_argument("--seed", type=int)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("apply", help="paste a patch into an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--patch", required=True)
    sp.add_argument("--x", type=int, default=0)
    sp.add_argument("--y", type=int, default=0)
    sp.add_argument("--rot", type=int, default=0, choices=[0, 90, 180, 270])
    sp.add_argument("--config")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_apply)

    sp = sub.add_parser("tile", help="tile a patch over a region of an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--patch", required=True)
    sp.add_argument("--region", default="full")
    sp.add_argument("--gap", type=int, default=0)
    sp.add_argument("--no-crop", action="store_true", help="omit partial tiles instead of cropping")
    sp.add_argument("--config")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_tile)

    sp = sub.add_parser("simulate", help="run an image through the camera simulation")
    sp.add_argument("--image", required=True)
    sp.add_argument("--pipeline", help="JSON config with camsim.stages")
    sp.add_argument("--patch", help="also report wallpaper gain and the distance curve")
    sp.add_argument("--metric", choices=["proxy", "tinycnn"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--figure", help="distance-curve PNG (with --patch)")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a metric gradient")
    metric_flags(sp)
    sp.add_argument("--probes", type=int, default=25)
    sp.add_argument("--step", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--size", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="generate a synthetic image directory")
    sp.add_argument("-n", type=int, required=True)
    sp.add_argument("-H", "--height", type=int, default=256)
    sp.add_argument("-W", "--width", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("report", help="merge eval reports into a comparison table and figures")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--logs", nargs="*", help="training log CSVs to plot")
    sp.add_argument("--no-figures", action="store_true")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _log(f"tipatch: error: {exc}")
        return 1
    except (ImageFormatError, PatchFormatError, ValueError, OSError) as exc:
        _log(f"tipatch: error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
