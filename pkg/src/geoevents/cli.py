"""Command-line entry point: simulate, detect, evaluate, ablate, fit-powerlaw, coherence."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import powerlaw
from .core_types import ConfigError, ParseError, RangeError, load_config, read_tweets
from .embedding import VectorLoadError, load_vectors
from .evaluation import ablate, evaluate, read_jsonl, run_stream, write_events
from .imagecoherence import (ImageStore, filter_human_images, load_image, read_annotations,
                             score_images)
from .pipeline import PipelineConfigError
from .synthetic import default_scenario, generate_stream, scenario_from_dict, write_scenario

EXIT_CONFIG = 2
EXIT_IO = 3

log = logging.getLogger("geoevents")


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return load_config(args.config, **overrides)


def _inputs(args):
    if not args.vectors:
        raise PipelineConfigError("--vectors is required")
    tweets = read_tweets(args.input)
    table = load_vectors(args.vectors, subword=args.subword)
    images = ImageStore(args.images_dir) if args.images_dir else ImageStore()
    annotations = read_annotations(args.annotations) if args.annotations else {}
    return tweets, table, images, annotations


def cmd_simulate(args) -> int:
    if args.scenario:
        scenario = scenario_from_dict(json.loads(Path(args.scenario).read_text()))
    else:
        scenario = default_scenario(args.seed, events=args.events, hotspots=args.hotspots,
                                    background_rate=args.background_rate)
    out = write_scenario(generate_stream(scenario), args.out)
    log.info("wrote scenario to %s", out)
    return 0


def cmd_detect(args) -> int:
    config = _config(args)
    tweets, table, images, annotations = _inputs(args)
    res = run_stream(tweets, config, table, images, annotations,
                     image_stage=not args.no_image_stage, start=args.start, end=args.end)
    write_events(args.out, res.events(not args.no_image_stage))
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for tr in res.traces:
                fh.write(json.dumps(tr, sort_keys=True, default=str) + "\n")
    return 0


def cmd_evaluate(args) -> int:
    result = evaluate(read_jsonl(args.detected), read_jsonl(args.truth))
    _dump(result.to_dict(), args.out)
    return 0


def cmd_ablate(args) -> int:
    config = _config(args)
    tweets, table, images, annotations = _inputs(args)
    res = ablate(tweets, read_jsonl(args.truth), config, table, images, annotations,
                 start=args.start, end=args.end)
    _dump(res.to_dict(), args.out)
    return 0


def cmd_fit_powerlaw(args) -> int:
    fh = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    with fh:
        try:
            counts = [int(line) for line in fh if line.strip()]
        except ValueError as exc:
            raise ParseError(f"bad count: {exc}") from exc
    try:
        fit = powerlaw.fit_with_pvalue(counts, args.iterations, args.seed, args.min_tail)
    except powerlaw.PowerLawFitError as exc:
        _dump({"error": str(exc)}, args.out)
        return 1
    _dump(fit.to_dict(), args.out)
    return 0


def cmd_coherence(args) -> int:
    config = _config(args)
    images = {Path(p).stem: load_image(p) for p in args.images}
    if args.annotations:
        kept = filter_human_images(sorted(images), read_annotations(args.annotations), config)
        images = {iid: images[iid] for iid in kept}
    report = score_images(images, config)
    _dump(report.to_dict() if report is not None else {"verdict": "bypass"}, args.out)
    return 0


def _stream_args(p):
    p.add_argument("--input", required=True, help="tweet stream (JSONL)")
    p.add_argument("--vectors", help="word-vector table (text format)")
    p.add_argument("--subword", action="store_true", help="character n-gram fallback")
    p.add_argument("--images-dir", help="directory image references resolve against")
    p.add_argument("--annotations", help="person-box annotations (JSONL)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--start", type=int, help="first window start (epoch seconds)")
    p.add_argument("--end", type=int, help="stream end (epoch seconds)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoevents", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic scenario directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--events", type=int, default=1)
    p.add_argument("--hotspots", type=int, default=0)
    p.add_argument("--background-rate", type=float, default=20.0)
    p.add_argument("--scenario", help="scenario JSON overriding the other options")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="run detection over a stream")
    _stream_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--no-image-stage", action="store_true")
    p.add_argument("--trace", help="write per-window stage counts (JSONL)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="precision and pseudo-recall against ground truth")
    p.add_argument("--detected", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="evaluate with and without the image gate")
    _stream_args(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fit-powerlaw", help="fit counts read one per line")
    p.add_argument("--input", default="-")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-tail", type=int, default=powerlaw.MIN_TAIL)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_powerlaw)

    p = sub.add_parser("coherence", help="image coherence ratio for a set of images")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--annotations", help="person-box annotations (JSONL); image id = file stem")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_coherence)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PipelineConfigError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (OSError, ParseError, RangeError, VectorLoadError) as exc:
        log.error("input/output error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
