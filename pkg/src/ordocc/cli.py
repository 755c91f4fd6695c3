"""Command-line entry point: ``ordocc {annotate,bki,eval,export,features}``.

Exit codes: 0 ok, 1 processing error, 2 input error, 3 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bki import BkiConfigError, complete_scene
from .config import ConfigError, PipelineConfig
from .export import export_ply, load_palette
from .geomfeat import export_features_csv
from .grid import GridDecodeError, LabelSpace, load_grid, save_grid
from .ingest import IngestError, load_frame
from .io_util import atomic_write_text
from .metrics import MetricsError, ProbGrid, evaluate
from .pipeline import annotate_sequence

logger = logging.getLogger("ordocc")

EXIT_OK, EXIT_PROCESSING, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _frame_range(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        start, end = text.split(":")
        return int(start), int(end)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--frames expects start:end, got {text!r}") from None


def _load_config(path: str | None) -> PipelineConfig:
    if path is not None and not Path(path).exists():
        raise CliError(f"config file not found: {path}", EXIT_CONFIG)
    try:
        return PipelineConfig.load(path)
    except (ConfigError, BkiConfigError) as exc:
        raise CliError(f"configuration error: {exc}", EXIT_CONFIG) from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_annotate(args) -> int:
    cfg = _load_config(args.config)
    seq = Path(args.sequence)
    if not seq.is_dir():
        raise CliError(f"sequence directory not found: {seq}", EXIT_INPUT)
    if not (seq / "poses.txt").exists():
        raise CliError(f"poses file not found: {seq / 'poses.txt'}", EXIT_INPUT)
    invert = True if args.invert_poses else None
    try:
        result = annotate_sequence(seq, cfg, args.key, _frame_range(args.frames), threads=args.threads,
                                   invert_poses=invert)
    except (FileNotFoundError, IngestError, IndexError) as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    if args.dry_run:
        print(f"dry run: {result.manifest['num_points']} points, window {result.manifest['frame_window']}; "
              "nothing written", file=sys.stderr)
        return EXIT_OK
    out = Path(args.out)
    save_grid(result.semantic, out / "semantic.ordg")
    save_grid(result.cost, out / "cost.ordg")
    manifest = dict(result.manifest)
    manifest["outputs"] = {"semantic": "semantic.ordg", "cost": "cost.ordg"}
    manifest["config"] = cfg.to_json()
    if args.invert_poses:
        manifest["config"]["ingest"]["invert_poses"] = True
    atomic_write_text(out / "manifest.json", _dump(manifest))
    return EXIT_OK


def cmd_bki(args) -> int:
    cfg = _load_config(args.config)
    try:
        frame = load_frame(args.cloud, args.labels, id_map=cfg.ingest.resolved_id_map(),
                           strict=cfg.ingest.strict_labels)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    except IngestError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    keep = (frame.labels != 0) & (frame.labels != 255)
    grid = complete_scene(frame.xyz[keep], frame.labels[keep], cfg.grid, cfg.bki, threads=args.threads)
    if args.dry_run:
        return EXIT_OK
    save_grid(grid, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        pred = load_grid(args.pred)
        gt = load_grid(args.gt)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    except GridDecodeError as exc:
        raise CliError(f"cannot decode grid: {exc}", EXIT_INPUT) from None
    if args.classes is not None:
        want = LabelSpace.parse(args.classes)
        for name, g in (("prediction", pred), ("ground truth", gt)):
            if g.space is not want:
                raise CliError(f"{name} is a {g.space.name.lower()} grid, --classes asked for "
                               f"{want.name.lower()}", EXIT_INPUT)
    probs = None
    if args.probs is not None:
        probs = ProbGrid.over_mask(gt, np.load(args.probs), logits=args.logits)
    weights = None if args.weights is None else np.asarray(json.loads(Path(args.weights).read_text()), float)
    try:
        report = evaluate(pred, gt, probs, weights)
    except MetricsError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    sys.stdout.write(_dump(report))
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        grid = load_grid(args.grid)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    except GridDecodeError as exc:
        raise CliError(f"cannot decode grid: {exc}", EXIT_INPUT) from None
    palette = None
    if args.palette is not None:
        try:
            palette = load_palette(args.palette, grid.space)
        except (OSError, ValueError) as exc:
            raise CliError(f"palette error: {exc}", EXIT_CONFIG) from None
    if args.dry_run:
        return EXIT_OK
    n = export_ply(grid, args.out, palette, binary=args.binary)
    logger.info("wrote %d points to %s", n, args.out)
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = _load_config(args.config)
    invert = True if args.invert_poses else None
    try:
        result = annotate_sequence(args.sequence, cfg, args.key, _frame_range(args.frames),
                                   threads=args.threads, invert_poses=invert)
    except (FileNotFoundError, IngestError, IndexError) as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    if not args.dry_run:
        export_features_csv(result.elevation, result.features, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordocc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="pipeline configuration JSON")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")

    a = sub.add_parser("annotate", help="build semantic and cost grids from a sequence")
    a.add_argument("sequence")
    a.add_argument("--key", type=int, default=0, help="key frame index")
    a.add_argument("--frames", help="explicit frame range start:end (end exclusive)")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--invert-poses", action="store_true")
    common(a)
    a.set_defaults(func=cmd_annotate)

    b = sub.add_parser("bki", help="kernel-inference scene completion of one labeled cloud")
    b.add_argument("cloud")
    b.add_argument("--labels", required=True)
    b.add_argument("--out", required=True)
    common(b)
    b.set_defaults(func=cmd_bki)

    e = sub.add_parser("eval", help="score a predicted grid against ground truth")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--classes", choices=["semantic", "cost"])
    e.add_argument("--probs", help=".npy scores (num_voxels or num_valid rows) for the loss report")
    e.add_argument("--logits", action="store_true", help="--probs holds logits")
    e.add_argument("--weights", help="JSON list of class weights")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write non-empty voxels as a colored PLY")
    x.add_argument("grid")
    x.add_argument("--out", required=True)
    x.add_argument("--palette", help="JSON label -> [r, g, b]")
    x.add_argument("--binary", action="store_true")
    x.add_argument("--dry-run", action="store_true")
    x.set_defaults(func=cmd_export)

    f = sub.add_parser("features", help="dump per-cell terrain features as CSV")
    f.add_argument("sequence")
    f.add_argument("--key", type=int, default=0)
    f.add_argument("--frames")
    f.add_argument("--out", required=True)
    f.add_argument("--invert-poses", action="store_true")
    common(f)
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except CliError as exc:
        print(f"ordocc {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic for batch runs
        logger.debug("unhandled error", exc_info=True)
        print(f"ordocc {args.command}: processing error: {exc}", file=sys.stderr)
        return EXIT_PROCESSING
    logger.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
