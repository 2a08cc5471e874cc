"""`fmapshield compare`: cumulative curves, distances and convergence tables."""

import argparse
from pathlib import Path

from fmapshield.codecs.model_codec import load_model
from fmapshield.codecs.table_codec import (
    read_records,
    read_table,
    write_convergence,
    write_curve,
    write_distances,
)
from fmapshield.commands.common import MANIFEST_SUFFIX, RunRecorder, emit, out_dir
from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.vulnerability import VulnerabilityTable
from fmapshield.services.analysis import (
    build_curve,
    compare_error_models,
    convergence_study,
    heuristic_accuracy,
)
from fmapshield.services.engine import count_macs


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "compare",
        parents=[common],
        help="compare vulnerability rankings",
        description=(
            "Accumulate baseline RelV in the order each candidate table ranks fmaps and "
            "report Manhattan distances; optionally sweep injections per fmap against an "
            "oracle campaign or compare error models."
        ),
    )
    parser.add_argument("--baseline", type=Path, help="vulnerability table whose RelV is summed")
    parser.add_argument("--candidate", type=Path, action="append", default=[], help="table CSV")
    parser.add_argument("--oracle-records", type=Path, help="large mismatch campaign")
    parser.add_argument("--sweep", type=int, nargs="+", help="injections per fmap to test")
    parser.add_argument("--model", type=Path, help="needed with --oracle-records")
    parser.add_argument(
        "--error-model-table",
        type=Path,
        action="append",
        default=[],
        help="RelV table of one error model (repeatable); first is the reference",
    )
    parser.set_defaults(handler=run)


def _tables(paths: list[Path], recorder: RunRecorder) -> dict[str, VulnerabilityTable]:
    tables = {}
    for path in paths:
        if path.stem in tables:
            raise InvalidRequestError(f"two tables named {path.stem}; rename one")
        recorder.add_input(f"table:{path.name}", path)
        tables[path.stem] = read_table(path)
    return tables


def _scores(table: VulnerabilityTable) -> dict:
    return {row.fmap: row.v_fmap for row in table.fmaps}


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("compare", args)
    target = out_dir(args)
    summary = {}
    if args.baseline is None and args.oracle_records is None and not args.error_model_table:
        raise InvalidRequestError("nothing to compare: give --baseline, --oracle-records or tables")

    if args.baseline is not None:
        with recorder.stage("curves"):
            recorder.add_input("baseline", args.baseline)
            baseline = read_table(args.baseline)
            if not baseline.rel_v_defined:
                raise InvalidRequestError(f"{args.baseline}: baseline RelV undefined (V_CNN = 0)")
            baseline_rel_v = baseline.rel_v()
            candidates = _tables(args.candidate, recorder)
            curves = {"baseline": build_curve(baseline_rel_v, baseline_rel_v)}
            curves |= {
                name: build_curve(_scores(table), baseline_rel_v)
                for name, table in candidates.items()
            }
            distances = heuristic_accuracy(
                baseline_rel_v, {name: _scores(table) for name, table in candidates.items()}
            )
        for name, curve in curves.items():
            write_curve(
                recorder.add_output(target / f"curve-{name}.csv"), name, curve, recorder.hash
            )
        write_distances(recorder.add_output(target / "distances.csv"), distances, recorder.hash)
        summary["distances"] = {d.name: d.distance for d in distances}

    if args.oracle_records is not None:
        if args.model is None or not args.sweep:
            raise InvalidRequestError("--oracle-records needs --model and --sweep")
        with recorder.stage("convergence"):
            recorder.add_input("oracle", args.oracle_records)
            recorder.add_input("model", args.model)
            census = count_macs(load_model(args.model))
            points = convergence_study(census, read_records(args.oracle_records), args.sweep)
        path = recorder.add_output(target / "convergence.csv")
        write_convergence(path, points, recorder.hash)
        summary["convergence_points"] = len(points)

    if args.error_model_table:
        tables = _tables(args.error_model_table, recorder)
        reference = args.error_model_table[0].stem
        pairs = compare_error_models(tables, reference)
        path = recorder.add_output(target / "error-models.csv")
        write_distances(path, pairs, recorder.hash)
        summary["error_models"] = {f"{d.name}~{d.reference}": d.distance for d in pairs}

    recorder.save(target / f"compare{MANIFEST_SUFFIX}")
    emit(summary)
    return 0
