"""Command-line entry point: ``optiacoustic {simulate,map,eval,info}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import ConfigurationError, DataError, EmptyMapError
from .evaluation import summarize, voxel_errors, write_distances_csv
from .gpmap import STATE_NAMES, export_map, export_occupied_ply, import_map
from .pipeline import map_sequence, read_manifest, simulate_sequence
from .simulator import load_scene

log = logging.getLogger("optiacoustic")

EXIT_OK, EXIT_EMPTY_MAP, EXIT_CONFIG, EXIT_DATA = 0, 2, 3, 4


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"sim.rng_seed={args.seed}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _scene(args, cfg: PipelineConfig):
    path = args.scene or cfg.scene_path()
    if path is None:
        raise ConfigurationError("no scene given (use --scene or paths.scene)")
    return load_scene(path)


def _read_timings(path) -> list:
    try:
        lines = Path(path).read_text().splitlines()[1:]
        return [float(line.split(",")[2]) for line in lines if line.strip()]
    except (OSError, IndexError, ValueError) as exc:
        raise DataError(f"{path}: cannot read timing log ({exc})") from exc


def cmd_simulate(args) -> int:
    cfg = _config(args)
    manifest = simulate_sequence(_scene(args, cfg), cfg, args.out)
    print(f"wrote {len(manifest)} records to {args.out}")
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = _config(args)
    manifest = read_manifest(args.manifest)
    if args.no_masks:
        manifest = manifest.without_masks()
    result = map_sequence(manifest, cfg)
    export_map(result.omap, args.out)
    if args.ply:
        export_occupied_ply(result.omap, args.ply)
    if args.timings:
        with open(args.timings, "w") as fh:
            fh.write("keyframe,stereo,seconds\n")
            for k, (t, c) in enumerate(zip(result.timings, result.counts)):
                fh.write(f"{k},{c['stereo']},{t!r}\n")
    print(f"keyframes: {result.keyframes}  skipped: {result.skipped}  cells: {len(result.omap)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    scene = _scene(args, cfg)
    omap = import_map(args.map)
    bounds = cfg.build_bounds()
    timings = _read_timings(args.timings) if args.timings else None
    report = summarize(voxel_errors(omap, scene, bounds), bounds, timings)
    text = report.as_text()
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    if args.csv:
        Path(args.csv).write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    if args.distances:
        write_distances_csv(args.distances, omap, scene, bounds)
    return EXIT_OK


def cmd_info(args) -> int:
    cfg = _config(args)
    sys.stdout.write(cfg.dumps())
    if args.manifest:
        manifest = read_manifest(args.manifest)
        masks = sum(r.mask is not None for r in manifest.records)
        span = manifest.records[-1].t - manifest.records[0].t if manifest.records else 0.0
        print(f"# manifest: {len(manifest)} records, {masks} masks, {span:.3f} s")
    if args.map:
        omap = import_map(args.map)
        _, states = omap.states()
        counts = {name: int((states == i).sum()) for i, name in enumerate(STATE_NAMES)}
        print(f"# map: {len(omap)} cells, " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optiacoustic", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="pipeline YAML file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    sp = sub.add_parser("simulate", help="render a synthetic sequence")
    common(sp)
    sp.add_argument("--scene")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("map", help="build an occupancy map from a manifest")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="map CSV")
    sp.add_argument("--ply", help="occupied-voxel PLY")
    sp.add_argument("--timings", help="per-keyframe timing CSV")
    sp.add_argument("--no-masks", action="store_true", help="ignore masks (sonar-only)")
    sp.set_defaults(func=cmd_map)

    sp = sub.add_parser("eval", help="score a map against its scene")
    common(sp)
    sp.add_argument("--map", required=True)
    sp.add_argument("--scene")
    sp.add_argument("--timings", help="timing CSV from 'map'")
    sp.add_argument("--report", help="write the key: value report here")
    sp.add_argument("--csv", help="write the report as a CSV row")
    sp.add_argument("--distances", help="per-voxel distance CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("info", help="print the parsed config and dataset stats")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--map")
    sp.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmptyMapError as exc:
        log.error("%s", exc)
        return EXIT_EMPTY_MAP
    except ConfigurationError as exc:
        log.error("configuration: %s", exc)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
