"""Command-line entry point.

Subcommands: preprocess, synth, train, register, evaluate, plot, serve.
Every command exits 0 on success and nonzero with a single
`error: <Kind>: <message>` line on stderr otherwise. `--seed` and the other
`--set key=value` overrides win over the `--config` file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, GlobalConfig


def _parse_overrides(pairs: list[str], seed: int | None) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if seed is not None:
        overrides["seed"] = str(seed)
    return overrides


def _global_config(args) -> GlobalConfig:
    return GlobalConfig.load(args.config, _parse_overrides(args.set, args.seed))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the seed")


def cmd_preprocess(args) -> int:
    from . import imagecore
    cfg = _global_config(args).preprocess_config()
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(list(in_dir.glob("*.png")) + list(in_dir.glob("*.pgm")))
    for path in paths:
        raw = imagecore.read_image(path)
        gray = imagecore.preprocess(raw, cfg)
        imagecore.write_png(out_dir / (path.stem + ".png"), gray)
    print(f"preprocessed {len(paths)} image(s) -> {out_dir}")
    return 0


def cmd_synth(args) -> int:
    from . import data
    cfg = _global_config(args).synth_config()
    info = data.write_synthetic_dataset(cfg, args.out_dir)
    print(f"synthetic dataset: {info['n_images']} images, "
          f"{info['n_pairs']} pairs -> {info['out_dir']}")
    return 0


def cmd_train(args) -> int:
    from . import nets, training
    gcfg = _global_config(args)
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    cfg = gcfg.train_config(checkpoint_dir=args.checkpoint_dir, log_path=log_path)
    train_set, val_set = training.load_samples(args.data, gcfg.preprocess_config())
    if not train_set:
        raise ValueError(f"no training samples in {args.data}")
    data_shape = tuple(train_set[0].image.shape)
    if args.kind == "teacher":
        spec = gcfg.model_spec("teacher", fallback_input=data_shape)
        params, log = training.train_teacher(train_set, spec, cfg, val=val_set)
    else:
        if not args.scratch and not args.teacher:
            raise ValueError("student training requires --teacher CHECKPOINT "
                             "(or --scratch)")
        spec = gcfg.model_spec("student", fallback_input=data_shape)
        if args.scratch:
            params, log = training.train_student_scratch(train_set, spec, cfg, val=val_set)
        else:
            teacher = nets.load_checkpoint(args.teacher)
            params, log = training.train_student_rkd(train_set, teacher, spec, cfg,
                                                     val=val_set)
    nets.save_checkpoint(params, args.out)
    final = log.records[-1].losses.total if log.records else float("nan")
    print(f"trained {args.kind} for {cfg.epochs} epoch(s); final loss {final:.4f}; "
          f"checkpoint -> {args.out}")
    return 0


def _matches_dump(pair, outcome, details) -> dict:
    from .keypoints import KeypointSet
    kq: KeypointSet = details.get("query_kps", KeypointSet.empty())
    kr: KeypointSet = details.get("ref_kps", KeypointSet.empty())
    matches = details.get("matches")
    return {
        "pair_id": pair.pair_id,
        "query": pair.query_path,
        "ref": pair.ref_path,
        "query_keypoints": [[float(x), float(y), float(s)]
                            for (x, y), s in zip(kq.xy, kq.scores)],
        "ref_keypoints": [[float(x), float(y), float(s)]
                          for (x, y), s in zip(kr.xy, kr.scores)],
        "matches": [] if matches is None else
                   [[int(a), int(b), float(d)] for (a, b), d
                    in zip(matches.indices, matches.distances)],
        **outcome.to_dict(),
    }


def cmd_register(args) -> int:
    from . import nets, registration
    from .geometry import load_correspondences
    gcfg = _global_config(args)
    cfg = gcfg.registration_config()
    params = nets.load_checkpoint(args.checkpoint)
    detector = registration.ModelDetector(params, cfg)
    controls = load_correspondences(args.controls) if args.controls else None
    pair = registration.PairRecord(pair_id=args.pair_id, query_path=args.query,
                                   ref_path=args.ref, controls=controls,
                                   category=args.category)
    details: dict = {}
    outcome = registration.register_pair(detector, pair, cfg, details=details)
    Path(args.out).write_text(json.dumps(outcome.to_dict(), indent=1))
    if args.matches_out:
        Path(args.matches_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.matches_out).write_text(
            json.dumps(_matches_dump(pair, outcome, details), indent=1))
    print(f"{pair.pair_id}: {outcome.status}"
          + (f" ({outcome.verdict}, MEE {outcome.mee:.3f}, MAE {outcome.mae:.3f})"
             if outcome.status == registration.EVALUATED else f" ({outcome.note})"))
    return 0


def cmd_evaluate(args) -> int:
    from . import nets, registration
    gcfg = _global_config(args)
    cfg = gcfg.registration_config()
    params = nets.load_checkpoint(args.checkpoint)
    detector = registration.ModelDetector(params, cfg)
    pairs = registration.load_manifest(args.manifest)
    report = registration.evaluate_dataset(detector, pairs, cfg)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=1))
    table = registration.format_report_table(report)
    if args.table:
        Path(args.table).write_text(table)
    print(table, end="")
    return 0


def cmd_plot(args) -> int:
    from . import data, plots
    if args.what == "dist":
        if not args.annotations:
            raise ValueError("plot dist requires --annotations")
        ann_dir = Path(args.annotations)
        paths = sorted(ann_dir.glob("*.json")) if ann_dir.is_dir() else [ann_dir]
        annotations = [data.load_annotations(p) for p in paths]
        if not annotations:
            raise ValueError(f"no annotation files under {ann_dir}")
        counts = [(a.image_id, len(a.keypoints)) for a in annotations]
        Path(args.out_svg).write_text(
            plots.keypoint_histogram_svg([c for _, c in counts], bins=args.bins))
        Path(args.out_csv).write_text(plots.keypoint_counts_csv(counts))
        stats = data.keypoint_stats(annotations, bins=args.bins)
        print(f"keypoints/image over {stats['n_images']} images: "
              f"mean {stats['mean']:.2f} +/- {stats['std']:.2f}, "
              f"range {stats['min']:.0f}-{stats['max']:.0f}")
    else:
        import numpy as np
        from . import imagecore
        if not args.matches:
            raise ValueError("plot matches requires --matches")
        doc = json.loads(Path(args.matches).read_text())
        base = Path(args.matches).parent
        def find(p):
            cand = Path(p)
            return cand if cand.is_file() else base / p
        q = imagecore.extract_green(imagecore.read_image(find(doc["query"])))
        r = imagecore.extract_green(imagecore.read_image(find(doc["ref"])))
        qxy = np.asarray([[p[0], p[1]] for p in doc["query_keypoints"]])
        rxy = np.asarray([[p[0], p[1]] for p in doc["ref_keypoints"]])
        pairs = [(m[0], m[1]) for m in doc["matches"]]
        dists = [m[2] for m in doc["matches"]]
        Path(args.out_svg).write_text(plots.matches_svg(q, r, qxy, rxy, pairs))
        Path(args.out_csv).write_text(plots.matches_csv(qxy, rxy, pairs, dists))
    print(f"wrote {args.out_svg} and {args.out_csv}")
    return 0


def cmd_serve(args) -> int:
    import os

    from . import server
    data_dir = args.data or os.environ.get(server.DATA_DIR_ENV)
    if not data_dir:
        raise ValueError(f"no data dir: pass --data or set {server.DATA_DIR_ENV}")
    srv = server.make_server(data_dir, port=args.port, host=args.host,
                             static_dir=args.static)
    host, port = srv.server_address[:2]
    print(f"serving {data_dir} on http://{host}:{port}/ (Ctrl-C to stop)")
    server.serve_forever(srv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retinamatch",
        description="Retinal keypoint detection, matching, and registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="batch-run the enhancement pipeline")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", dest="out_dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the teacher or distill the student")
    p.add_argument("kind", choices=["teacher", "student"])
    p.add_argument("--data", required=True, help="training manifest JSON")
    p.add_argument("--out", required=True, help="output checkpoint directory")
    p.add_argument("--teacher", help="teacher checkpoint (student mode)")
    p.add_argument("--scratch", action="store_true",
                   help="train the student without distillation")
    p.add_argument("--checkpoint-dir", help="periodic checkpoint directory")
    p.add_argument("--log", help="JSON-lines training log path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--controls", help="control-point text file")
    p.add_argument("--category", choices=["S", "A", "P"])
    p.add_argument("--pair-id", default="pair")
    p.add_argument("--out", required=True, help="outcome JSON path")
    p.add_argument("--matches-out", help="match dump JSON path (for the review UI)")
    _add_common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="run the registration protocol on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--table", help="also write the aligned text table here")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="emit SVG + CSV plots")
    p.add_argument("what", choices=["dist", "matches"])
    p.add_argument("--annotations", help="annotation dir or file (dist)")
    p.add_argument("--matches", help="match dump JSON (matches)")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out-svg", required=True)
    p.add_argument("--out-csv", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("serve", help="serve the annotation / review HTTP API")
    p.add_argument("--data", help="data directory (or RETINA_MATCH_DATA_DIR)")
    p.add_argument("--port", type=int, default=8712)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static", help="static UI bundle directory")
    _add_common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line, machine-parsable failure
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
