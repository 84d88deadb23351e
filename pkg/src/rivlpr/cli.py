"""Command-line front end.

Subcommands cover the pipeline end to end: project scans to range images,
mine patch pairs for one scan pair, train on a scan directory, compute a
descriptor database, and evaluate retrieval.  Outputs are files only; all
commands are deterministic given their inputs and --seed.

Exit codes: 0 success, 2 empty or missing input, 3 alignment failure,
4 protocol violation, 5 shape mismatch (1 for unexpected errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .aggregate import load_descriptors, save_descriptors
from .config import PipelineConfig, parse_pipeline_config
from .evaluate import run_protocol, write_pr_svg
from .mining import MiningUnavailableError, mine_pair, save_pairs
from .pipeline import build_db, db_from_matrix, describe_image
from .riv import load_riv, project_scan, save_riv
from .scan_geometry import AlignmentError, MalformedFileError, load_poses, load_scan
from .trainer import load_checkpoint, save_checkpoint, save_trace_csv, train

log = logging.getLogger("rivlpr")

EXIT_OK = 0
EXIT_EMPTY_INPUT = 2
EXIT_ALIGNMENT = 3
EXIT_PROTOCOL = 4
EXIT_SHAPE = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("RIVLPR_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return parse_pipeline_config(path)


def _scan_paths(scan_dir, fmt: str) -> list[Path]:
    suffix = ".bin" if fmt == "xyzr-bin" else ".csv"
    root = Path(scan_dir)
    if not root.is_dir():
        raise CliError(EXIT_EMPTY_INPUT, f"no scans: {scan_dir} is not a directory")
    paths = sorted(p for p in root.iterdir() if p.suffix == suffix)
    if not paths:
        raise CliError(EXIT_EMPTY_INPUT, f"no scans: {scan_dir} holds no *{suffix} files")
    return paths


def _load_sequence(scan_dir, poses_path, fmt: str):
    paths = _scan_paths(scan_dir, fmt)
    poses = load_poses(poses_path)
    if len(poses) != len(paths):
        raise CliError(EXIT_SHAPE, f"{len(paths)} scans but {len(poses)} poses")
    scans = []
    for path, pose in zip(paths, poses):
        scans.append(load_scan(path, format=fmt, timestamp=pose.timestamp, id=path.stem))
    return scans, poses


def cmd_project(args) -> int:
    cfg = _load_config(args.config)
    paths = _scan_paths(args.scans, args.format)
    poses = load_poses(args.poses) if args.poses else None
    if poses is not None and len(poses) != len(paths):
        raise CliError(EXIT_SHAPE, f"{len(paths)} scans but {len(poses)} poses")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(item):
        i, path = item
        try:
            scan = load_scan(path, format=args.format, id=path.stem)
        except MalformedFileError as exc:
            log.warning("skipping %s: %s", path, exc)
            return None
        img = project_scan(scan, cfg.riv)
        out_path = out_dir / (path.stem + ".riv")
        save_riv(out_path, img)
        row = {"id": path.stem, "file": out_path.name}
        if poses is not None:
            row["timestamp"] = poses[i].timestamp
            row["position"] = [float(x) for x in poses[i].translation]
            row["quaternion"] = [float(x) for x in poses[i].quaternion]
        else:
            row["timestamp"] = 0.0
            row["position"] = [0.0, 0.0, 0.0]
            row["quaternion"] = [0.0, 0.0, 0.0, 1.0]
        return row

    with ThreadPoolExecutor(max_workers=max(args.threads, 1)) as pool:
        rows = [r for r in pool.map(one, enumerate(paths)) if r is not None]
    if not rows:
        raise CliError(EXIT_EMPTY_INPUT, "no scans could be projected")
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    print(f"projected {len(rows)} scans -> {out_dir}")
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = _load_config(args.config)
    poses = load_poses(args.poses)
    if len(poses) < 2:
        raise CliError(EXIT_EMPTY_INPUT, "pose file must hold the two scan poses")
    scan_a = load_scan(args.scan_a, format=args.format, id=Path(args.scan_a).stem)
    scan_b = load_scan(args.scan_b, format=args.format, id=Path(args.scan_b).stem)
    gap = float(np.linalg.norm(poses[0].translation - poses[1].translation))
    if gap > cfg.mining.max_pair_distance:
        raise CliError(EXIT_PROTOCOL, f"not a positive pair: scans are {gap:.1f} m apart")
    try:
        pairs = mine_pair(scan_a, scan_b, poses[0], poses[1], cfg.riv, cfg.mining, seed=args.seed)
    except (MiningUnavailableError, AlignmentError) as exc:
        raise CliError(EXIT_ALIGNMENT, str(exc)) from exc
    save_pairs(args.out, pairs, cfg.mining)
    print(f"mined {len(pairs)} positive pairs -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_cfg = cfg.train
    if args.seed is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, seed=args.seed)
    scans, poses = _load_sequence(args.scans, args.poses, args.format)
    result = train(list(zip(scans, poses)), train_cfg, riv_cfg=cfg.riv,
                   mining_cfg=cfg.mining, loss_cfg=cfg.loss)
    save_checkpoint(args.out, result.checkpoint)
    save_trace_csv(str(args.out) + ".trace.csv", result.trace)
    final = result.trace[-1][3] if result.trace else float("nan")
    print(f"trained {result.checkpoint.step} steps, final loss {final:.4f} -> {args.out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    riv_dir = Path(args.riv_dir)
    manifest_path = riv_dir / "manifest.json"
    if not riv_dir.is_dir():
        raise CliError(EXIT_EMPTY_INPUT, f"{riv_dir} is not a directory")
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as fh:
            rows = json.load(fh)
    else:
        rows = [
            {"id": p.stem, "file": p.name, "timestamp": 0.0,
             "position": [0.0, 0.0, 0.0], "quaternion": [0.0, 0.0, 0.0, 1.0]}
            for p in sorted(riv_dir.glob("*.riv"))
        ]
    if not rows:
        raise CliError(EXIT_EMPTY_INPUT, f"no range images under {riv_dir}")

    def one(row):
        img = load_riv(riv_dir / row["file"])
        desc = describe_image(img, ckpt.adapter, ckpt.aggregate, num_blocks=ckpt.config.num_blocks)
        if not desc.valid:
            raise CliError(EXIT_EMPTY_INPUT, f"degenerate descriptor for {row['id']}")
        return desc.values

    with ThreadPoolExecutor(max_workers=max(args.threads, 1)) as pool:
        vals = list(pool.map(one, rows))
    matrix = np.stack(vals)
    save_descriptors(args.out, matrix, rows)
    print(f"described {len(rows)} images ({matrix.shape[1]}-d) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    db_mat, db_meta = load_descriptors(args.db)
    if db_meta is None:
        raise CliError(EXIT_EMPTY_INPUT, f"{args.db}: missing sidecar index")
    db = db_from_matrix(db_mat, db_meta)
    proto = cfg.eval
    if proto.mode == "inter":
        if not args.queries:
            raise CliError(EXIT_EMPTY_INPUT, "inter-session evaluation needs --queries")
        q_mat, q_meta = load_descriptors(args.queries)
        if q_meta is None:
            raise CliError(EXIT_EMPTY_INPUT, f"{args.queries}: missing sidecar index")
        if q_mat.shape[1] != db_mat.shape[1]:
            raise CliError(EXIT_SHAPE, f"descriptor dims differ: db {db_mat.shape[1]}, queries {q_mat.shape[1]}")
        queries = db_from_matrix(q_mat, q_meta)
    else:
        queries = None
    report = run_protocol(db, queries, proto)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = {k: report[k] for k in ("status", "num_queries", "recall_at_1", "max_f1", "f1_threshold")}
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(str(out) + ".pr.csv", "w", encoding="utf-8") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in report["pr_curve"]:
            fh.write(f"{t!r},{p!r},{r!r}\n")
    if args.plot:
        write_pr_svg(str(out) + ".pr.svg", report["pr_curve"])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rivlpr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-scan stages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="project scans into RIV1 range images")
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", default=None, help="optional trajectory for the manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--format", default="xyzr-bin", choices=["xyzr-bin", "csv"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("mine", help="mine patch pairs for one scan pair")
    p.add_argument("--scan-a", required=True)
    p.add_argument("--scan-b", required=True)
    p.add_argument("--poses", required=True, help="two poses: scan A then scan B")
    p.add_argument("--config", default=None)
    p.add_argument("--format", default="xyzr-bin", choices=["xyzr-bin", "csv"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mine, seed=0)

    p = sub.add_parser("train", help="train adapter and aggregation parameters")
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--format", default="xyzr-bin", choices=["xyzr-bin", "csv"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("describe", help="compute a descriptor database from range images")
    p.add_argument("--riv-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_describe)

    p = sub.add_parser("eval", help="retrieval evaluation of descriptor databases")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--plot", action="store_true", help="also write a PR-curve SVG")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None:
        args.seed = 0 if args.command == "mine" else None
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (MalformedFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
