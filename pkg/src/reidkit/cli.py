"""Command-line entry point.

    reidkit rank --metadata M --query-embeddings Q --gallery-embeddings G --out ranking.txt
    reidkit eval --metadata M --rankings ranking.txt --out report.csv
    reidkit synth-fig4 --out curve.csv
    reidkit kernels selfcheck

Exit status: 0 success, 1 validation or metric error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .dataset import load_dataset, load_metadata, validate_dataset
from .metrics import MEASURES, evaluate_all, per_query_csv, report_csv, report_markdown
from .ranking import DistanceMetric, ProtocolFilter, dump_rankings, rank_all, read_rankings
from .relation_kernels import DEFAULT_ALPHA
from .selfcheck import FAULTS, run_selfcheck
from .synthetic import POSITIONS, build_figure4_initial, sensitivity_curve

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        write_atomic(out, text)


def _int_list(raw: str) -> list[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from None
    if any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("k values must be >= 1")
    return values


def _measure_list(raw: str) -> list[str]:
    values = [v.strip().lower() for v in raw.split(",") if v.strip()]
    bad = [v for v in values if v not in MEASURES]
    if bad or not values:
        raise argparse.ArgumentTypeError(f"measures must be drawn from {','.join(MEASURES)}")
    return values


def _warn(d) -> None:
    for w in validate_dataset(d):
        print(f"warning: {w}", file=sys.stderr)


def cmd_rank(args) -> int:
    d = load_dataset(args.metadata, args.query_embeddings, args.gallery_embeddings)
    _warn(d)
    rankings = rank_all(d, DistanceMetric(args.metric), ProtocolFilter(args.protocol), normalize=args.normalize)
    write_atomic(args.out, dump_rankings(rankings, d))
    return EXIT_OK


def cmd_eval(args) -> int:
    d = load_metadata(args.metadata)
    _warn(d)
    rankings = read_rankings(args.rankings, d)
    measures = [m for m in MEASURES if m in args.measures]
    report = evaluate_all(
        rankings,
        d,
        ks=args.cmc_k,
        measures=measures,
        protocol=ProtocolFilter(args.protocol),
        per_query=args.per_query is not None,
    )
    if report.invalid_queries:
        print(
            f"warning: {len(report.invalid_queries)} of {report.n_queries} queries have no targets and were skipped",
            file=sys.stderr,
        )
    text = report_markdown(report, args.model) if args.format == "markdown" else report_csv(report)
    _emit(text, args.out)
    if args.per_query is not None:
        write_atomic(args.per_query, per_query_csv(report))
    return EXIT_OK


def cmd_synth_fig4(args) -> int:
    s0 = build_figure4_initial(args.cameras, args.targets_per_camera)
    steps = args.cameras if args.steps is None else args.steps
    curve = sensitivity_curve(s0, steps, args.position)
    _emit(curve.to_csv(), args.out)
    errors, ap, cgm = curve.steps[-1]
    print(f"errors={errors} mAP={ap:.6f} mCGM={cgm:.6f}", file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK


def cmd_kernels_selfcheck(args) -> int:
    results = run_selfcheck(alpha=args.alpha, seed=args.seed, fault=args.inject_fault)
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'} {r.name}"
        print(line + (f": {r.detail}" if r.detail else ""))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidkit", description="Camera-aware re-identification evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rank", help="rank the gallery for every query")
    p.add_argument("--metadata", required=True)
    p.add_argument("--query-embeddings", required=True)
    p.add_argument("--gallery-embeddings", required=True)
    p.add_argument("--metric", choices=[m.value for m in DistanceMetric], default="cosine")
    p.add_argument("--protocol", choices=[f.value for f in ProtocolFilter], default="standard")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True,
                   help="L2-normalize embeddings before computing distances (default: on)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="evaluate a ranking file")
    p.add_argument("--metadata", required=True)
    p.add_argument("--rankings", required=True)
    p.add_argument("--protocol", choices=[f.value for f in ProtocolFilter], default="standard")
    p.add_argument("--cmc-k", type=_int_list, default=[1, 5], help="comma-separated ranks (default 1,5)")
    p.add_argument("--measures", type=_measure_list, default=list(MEASURES), help="subset of cmc,map,mcgm")
    p.add_argument("--format", choices=["csv", "markdown"], default="csv")
    p.add_argument("--model", default="model", help="row label in markdown output")
    p.add_argument("--per-query", metavar="PATH", help="also write per-query AP/CGM breakdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-fig4", help="error-insertion sensitivity curve")
    p.add_argument("--cameras", type=int, default=10)
    p.add_argument("--targets-per-camera", type=int, default=10)
    p.add_argument("--steps", type=int)
    p.add_argument("--position", choices=POSITIONS, default="before")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth_fig4)

    p = sub.add_parser("kernels", help="relation kernel utilities")
    ksub = p.add_subparsers(dest="kernels_command", required=True)
    k = ksub.add_parser("selfcheck", help="run the kernel invariant suite")
    k.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    k.set_defaults(func=cmd_kernels_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
