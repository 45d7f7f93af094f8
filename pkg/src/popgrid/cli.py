"""Command-line front end.

Every subcommand that writes files also writes a run manifest (JSON) next to
its primary output. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .census import load_census_csv, write_census_csv
from .dasymetric import dasymetric_rescale, scale_factors
from .ensemble import Bag, bag_predict, load_bag
from .errors import DataError, NumericalError
from .evaluation import evaluate_blocks, evaluate_grid, scatter_export
from .grid import GridStack, composite, read_gridpack, write_gridpack
from .predictor import (
    FeatureConfig,
    init_predictor,
    load_branch,
    load_params,
    n_features,
    pretrain_builtup,
    save_branch,
    save_params,
)
from .regions import NODATA, RegionMap, iou_match, merge_groups, merge_smallest, parse_regions, rasterize
from .synth import WorldConfig, coarsen_census, generate_world
from .training import TrainConfig, save_history, train

log = logging.getLogger("popgrid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def read_stack(path) -> GridStack:
    """Read a stack document ``{"members": [{"label", "path"}, ...]}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = doc["members"]
        grids = tuple(read_gridpack(path.parent / e["path"]) for e in entries)
        return GridStack(grids, tuple(e["label"] for e in entries))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed stack document {path}: {exc}") from None


def write_stack(stack: GridStack, path, prefix: str = "input") -> list[str]:
    path = Path(path)
    entries, written = [], []
    for label, grid in zip(stack.timestamps, stack.members):
        name = f"{prefix}_{label}.gpk"
        write_gridpack(grid, path.parent / name)
        entries.append({"label": label, "path": name})
        written.append(str(path.parent / name))
    path.write_text(json.dumps({"members": entries}, indent=1) + "\n", encoding="utf-8")
    return written + [str(path)]


def read_inputs(path) -> GridStack:
    """A ``.json`` stack document or a single GridPack."""
    if str(path).endswith(".json"):
        return read_stack(path)
    return GridStack((read_gridpack(path),), ("input",))


def read_regions(path) -> RegionMap:
    return RegionMap.from_grid(read_gridpack(path))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}") from None


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def feature_config(args) -> FeatureConfig:
    return FeatureConfig(args.window_radius, tuple(args.groups.split(",")))


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs, extra manifest fields)
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = WorldConfig(width=args.width, height=args.height, n_regions=args.regions, n_blobs=args.blobs,
                      noise_sigma=args.noise, n_seasons=args.seasons, seed=args.seed)
    world = generate_world(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = write_stack(world.inputs, out / "stack.json")
    files = {
        "truth_population.gpk": world.truth_population,
        "truth_builtup.gpk": world.truth_builtup,
        "truth_occupancy.gpk": world.truth_occupancy,
        "builtup_labels.gpk": world.builtup_labels,
        "regions.gpk": world.regions.to_grid(),
    }
    for name, grid in files.items():
        write_gridpack(grid, out / name)
        outputs.append(str(out / name))
    write_census_csv(world.census, out / "census.csv")
    outputs.append(str(out / "census.csv"))
    return [], outputs, {"world": asdict(cfg), "manifest_path": str(out / "manifest.json")}


def cmd_rasterize(args):
    partition = parse_regions(Path(args.regions).read_text(encoding="utf-8"))
    if args.like:
        like = read_gridpack(args.like)
        transform, width, height = like.transform, like.width, like.height
    else:
        if not (args.transform and args.width and args.height):
            raise UsageError("either --like or all of --transform, --width, --height are required")
        transform = tuple(float(v) for v in args.transform.split(","))
        width, height = args.width, args.height
    rmap = rasterize(partition, transform, width, height)
    write_gridpack(rmap.to_grid(), args.out)
    unassigned = int(np.count_nonzero(rmap.indices == NODATA))
    return [args.regions] + ([args.like] if args.like else []), [args.out], {"unassigned_pixels": unassigned}


def cmd_composite(args):
    stack = read_stack(args.stack)
    write_gridpack(composite(stack, args.method), args.out)
    return [args.stack], [args.out], {}


def cmd_pretrain(args):
    stack = read_inputs(args.stack)
    labels = read_gridpack(args.labels)
    branch = pretrain_builtup(stack, labels, args.epochs, seed=args.seed, config=feature_config(args),
                              lr=args.lr)
    save_branch(branch, args.out, {"seed": args.seed, "epochs": args.epochs,
                                   "window_radius": args.window_radius, "groups": args.groups})
    return [args.stack, args.labels], [args.out], {}


def cmd_train(args):
    stack = read_inputs(args.stack)
    rmap = read_regions(args.regions)
    census = load_census_csv(args.census)
    cfg = TrainConfig.from_dict(read_json(args.config)) if args.config else TrainConfig()
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["base_lr"] = args.lr
    if args.transfer:
        overrides["transfer_hidden"] = True
    cfg = replace(cfg, **overrides)
    fc = feature_config(args)
    builtup = load_branch(args.builtup) if args.builtup else None
    if args.variant == "factored" and builtup is None:
        raise UsageError("--builtup is required for the factored variant")
    if args.variant == "external_weights" and not args.external_band:
        raise UsageError("--external-band is required for the external_weights variant")
    exclude = (args.external_band,) if args.external_band else ()
    nf = n_features(stack[0], fc, exclude)
    if builtup is not None and builtup.n_inputs != nf:
        raise DataError(f"built-up branch expects {builtup.n_inputs} features, inputs give {nf}")
    p0 = init_predictor(args.variant, nf, seed=args.seed, builtup=builtup if args.variant == "factored" else None,
                        external_weight_band=args.external_band, feature_config=fc)
    params, history = train(stack, rmap, census, p0, cfg, transfer_source=builtup)
    save_params(params, args.out)
    outputs = [args.out]
    if args.history:
        save_history(history, args.history)
        outputs.append(args.history)
    inputs = [args.stack, args.regions, args.census] + ([args.builtup] if args.builtup else [])
    return inputs, outputs, {"train_config": asdict(cfg)}


def cmd_predict(args):
    stack = read_inputs(args.stack) if args.stack else None
    if args.bag:
        bag = load_bag(args.bag, stack)
        if args.mode:
            bag = Bag(bag.members, bag.composites, args.mode)
        inputs = [args.bag]
    else:
        if not args.params or stack is None:
            raise UsageError("either --bag or both --params and --stack are required")
        bag = Bag(tuple(load_params(p) for p in args.params), stack, args.mode or "full")
        inputs = list(args.params)
    if args.stack:
        inputs.append(args.stack)
    grid, count = bag_predict(bag)
    write_gridpack(grid, args.out)
    return inputs, [args.out], {"estimate_count": count, "mode": bag.mode}


def cmd_disaggregate(args):
    pred = read_gridpack(args.pred)
    adj, report = dasymetric_rescale(pred, read_regions(args.regions), load_census_csv(args.census))
    write_gridpack(adj, args.out)
    outputs = [args.out]
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
        outputs.append(args.report)
    return [args.pred, args.regions, args.census], outputs, {"unallocated": report.unallocated}


def cmd_evaluate(args):
    pred = read_gridpack(args.pred)
    inputs = [args.pred]
    if args.truth:
        truth = read_gridpack(args.truth)
        report = evaluate_grid(pred, truth, args.factor)
        inputs.append(args.truth)
    elif args.blocks and args.truth_table:
        blocks = read_regions(args.blocks)
        report = evaluate_blocks(pred, blocks, load_census_csv(args.truth_table))
        inputs += [args.blocks, args.truth_table]
    else:
        raise UsageError("either --truth or both --blocks and --truth-table are required")
    text = report.to_json()
    print(text)
    outputs = []
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        outputs.append(args.out)
    if args.scatter:
        if not args.truth:
            raise UsageError("--scatter needs --truth")
        both = pred.valid[0] & truth.valid[0]
        Path(args.scatter).write_text(scatter_export(truth.values[0][both], pred.values[0][both], args.floor),
                                      encoding="utf-8")
        outputs.append(args.scatter)
    return inputs, outputs, {"report": json.loads(text)}


def cmd_merge(args):
    rmap = read_regions(args.regions)
    inputs = [args.regions]
    if args.census:
        census = load_census_csv(args.census)
        merged, table = coarsen_census(rmap, census, args.target)
        steps = merge_smallest(rmap, args.target)[1]
        inputs.append(args.census)
    else:
        merged, steps = merge_smallest(rmap, args.target)
        table = None
    write_gridpack(merged.to_grid(), args.out)
    outputs = [args.out]
    if table is not None and args.census_out:
        write_census_csv(table, args.census_out)
        outputs.append(args.census_out)
    if args.log:
        write_json({"steps": [s._asdict() for s in steps],
                    "groups": {str(k): v for k, v in merge_groups(steps, rmap.ids).items()}}, args.log)
        outputs.append(args.log)
    return inputs, outputs, {"fallback_steps": sum(1 for s in steps if s.fallback)}


def cmd_match(args):
    pairs = iou_match(read_regions(args.a), read_regions(args.b), args.threshold)
    lines = ["region_a,region_b,iou"] + [f"{a},{b},{iou!r}" for a, b, iou in pairs]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [args.a, args.b], [args.out], {"matched": len(pairs)}


def cmd_scale_report(args):
    report = scale_factors(read_gridpack(args.pred), read_regions(args.regions), load_census_csv(args.census))
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    outputs = [args.out]
    if args.csv:
        Path(args.csv).write_text(report.factors_csv(), encoding="utf-8")
        outputs.append(args.csv)
    return [args.pred, args.regions, args.census], outputs, {}


def cmd_ablate(args):
    from . import experiments

    doc = read_json(args.config) if args.config else {}
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    world_doc = {"width": args.width, "height": args.height, "n_regions": args.regions,
                 "n_blobs": args.blobs, "seed": args.seed, **doc.get("world", {})}
    if "occupancy_range" in world_doc:
        world_doc["occupancy_range"] = tuple(world_doc["occupancy_range"])
    try:
        world = generate_world(WorldConfig(**world_doc))
    except TypeError as exc:
        raise UsageError(f"bad world configuration: {exc}") from None
    seeds = doc.get("seeds", [int(s) for s in args.seeds.split(",")])
    pre = doc.get("pretrain_epochs", args.pretrain_epochs)
    if args.study == "architecture":
        result = experiments.architecture_ablation(world, doc.get("n_regions", 16), seeds, train_cfg,
                                                   pretrain_epochs=pre)
    elif args.study == "ladder":
        result = experiments.scalability_ladder(world, doc.get("ladder", (100, 64, 32, 16)), seeds, train_cfg,
                                                pretrain_epochs=pre)
    elif args.study == "ensemble":
        result = experiments.ensemble_ablation(world, doc.get("n_members", 5), train_cfg, pretrain_epochs=pre)
    else:
        result = experiments.modality_ablation(world, doc.get("masks", (("S1",), ("S2",), ("S1", "S2"))),
                                               seeds, train_cfg, pretrain_epochs=pre)
    write_json(result, args.out)
    return [args.config] if args.config else [], [args.out], {"world": world_doc, "train_config": asdict(train_cfg)}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    features = _Parser(add_help=False)
    features.add_argument("--window-radius", type=int, default=0, choices=(0, 1))
    features.add_argument("--groups", default="S1,S2,AUX", help="comma-separated feature groups")

    parser = _Parser(prog="popgrid", description="Weakly supervised population mapping from census counts.")
    parser.add_argument("--version", action="version", version=f"popgrid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic world")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--regions", type=int, default=100)
    p.add_argument("--blobs", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seasons", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rasterize", parents=[common], help="GeoJSON regions -> region map GridPack")
    p.add_argument("--regions", required=True, help="GeoJSON FeatureCollection with region_id properties")
    p.add_argument("--like", help="GridPack whose size and transform to copy")
    p.add_argument("--transform", help="ox,oy,px,py")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("composite", parents=[common], help="per-cell median/mean over a stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--method", choices=("median", "mean"), default="median")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("pretrain-builtup", parents=[common, features], help="fit the built-up branch")
    p.add_argument("--stack", required=True, help="stack JSON or single GridPack")
    p.add_argument("--labels", required=True, help="binary built-up label GridPack")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common, features], help="fit the predictor to census counts")
    p.add_argument("--stack", required=True)
    p.add_argument("--regions", required=True, help="region map GridPack")
    p.add_argument("--census", required=True, help="census CSV region_id,count")
    p.add_argument("--variant", choices=("factored", "direct", "external_weights"), default="factored")
    p.add_argument("--builtup", help="pretrained built-up branch JSON")
    p.add_argument("--external-band", help="band holding fixed weights (external_weights variant)")
    p.add_argument("--transfer", action="store_true", help="start occupancy hidden layers from the built-up branch")
    p.add_argument("--config", help="JSON training configuration")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--history", help="write per-batch loss CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="population map from one model or a bag")
    p.add_argument("--params", action="append", help="trained params JSON (repeatable)")
    p.add_argument("--bag", help="bag manifest JSON")
    p.add_argument("--stack", help="stack JSON or single GridPack")
    p.add_argument("--mode", choices=("single", "seasons_only", "members_only", "full"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("disaggregate", parents=[common], help="rescale a prediction to census totals")
    p.add_argument("--pred", required=True)
    p.add_argument("--regions", required=True)
    p.add_argument("--census", required=True)
    p.add_argument("--report", help="write the scale-factor report JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_disaggregate)

    p = sub.add_parser("evaluate", parents=[common], help="R²/MAE/RMSE against a grid or census blocks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", help="reference population GridPack")
    p.add_argument("--factor", type=int, default=1, help="block-aggregation factor")
    p.add_argument("--blocks", help="block region map GridPack")
    p.add_argument("--truth-table", help="block counts CSV")
    p.add_argument("--scatter", help="write truth,pred CSV here")
    p.add_argument("--floor", type=float, default=0.5, help="scatter floor bin; <= 0 disables")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("merge-regions", parents=[common], help="merge smallest adjacent regions")
    p.add_argument("--regions", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--census", help="census CSV to coarsen alongside")
    p.add_argument("--census-out")
    p.add_argument("--log", help="write the merge log JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("match-regions", parents=[common], help="IoU matching between two region maps")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("scale-report", parents=[common], help="per-region census/prediction factors")
    p.add_argument("--pred", required=True)
    p.add_argument("--regions", required=True)
    p.add_argument("--census", required=True)
    p.add_argument("--csv", help="write per-region factors CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scale_report)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation study on a synthetic world")
    p.add_argument("--study", choices=("architecture", "ladder", "ensemble", "modality"), required=True)
    p.add_argument("--config", help="JSON with optional keys train, world, seeds, n_regions, ladder, "
                                    "n_members, masks, pretrain_epochs")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--regions", type=int, default=100)
    p.add_argument("--blobs", type=int, default=10)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def _run(args, parser):
    started = time.perf_counter()
    inputs, outputs, extra = args.func(args)
    manifest_path = extra.pop("manifest_path", None)
    if manifest_path is None and outputs:
        manifest_path = f"{outputs[0]}.manifest.json"
    if manifest_path:
        flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
        write_json({
            "subcommand": args.command,
            "flags": flags,
            "seed": args.seed,
            "inputs": [str(i) for i in inputs],
            "outputs": [str(o) for o in outputs],
            "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "duration_s": time.perf_counter() - started,
            **extra,
        }, manifest_path)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                _run(args, parser)
        else:
            _run(args, parser)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"popgrid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"popgrid: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"popgrid: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
