"""`fmapshield select`: greedy protection plan for a target coverage."""

import argparse
from pathlib import Path

from fmapshield.codecs.json_codec import save_json
from fmapshield.codecs.model_codec import load_model
from fmapshield.codecs.table_codec import read_records, read_table, write_coverage_curve
from fmapshield.commands.common import MANIFEST_SUFFIX, RunRecorder, emit, out_dir
from fmapshield.services.analysis import coverage_overhead_curve, greedy_select, validate_coverage
from fmapshield.services.engine import count_macs


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "select",
        parents=[common],
        help="choose fmaps to protect",
        description=(
            "Pick the shortest prefix of fmaps, by descending RelV, whose RelV reaches the "
            "target coverage. With --ts-records the prediction is checked against TS mismatches."
        ),
    )
    parser.add_argument("--model", type=Path, required=True)
    parser.add_argument("--table", type=Path, required=True, help="vulnerability table CSV")
    parser.add_argument("--coverage", type=float, required=True, help="target in (0, 1]")
    parser.add_argument("--ts-records", type=Path, help="TS campaign records for validation")
    parser.add_argument("--plan-out", type=Path, help="plan JSON path (default: OUT/plan.json)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("select", args)
    target = out_dir(args)
    recorder.add_input("model", args.model)
    recorder.add_input("table", args.table)
    census = count_macs(load_model(args.model))
    table = read_table(args.table)
    with recorder.stage("select"):
        plan = greedy_select(table, census, args.coverage)
        curve = coverage_overhead_curve(table, census)
    plan_path = recorder.add_output(args.plan_out or target / "plan.json")
    save_json(plan_path, plan)
    write_coverage_curve(recorder.add_output(target / "coverage.csv"), curve, recorder.hash)
    summary = {
        "plan": plan_path,
        "fmaps": len(plan.selected_fmaps),
        "predicted_coverage": plan.predicted_coverage,
        "mac_overhead_fraction": plan.mac_overhead_fraction,
    }
    if args.ts_records is not None:
        recorder.add_input("ts_records", args.ts_records)
        validation = validate_coverage(plan, read_records(args.ts_records), census)
        save_json(recorder.add_output(target / "coverage-validation.json"), validation)
        summary["actual_coverage"] = validation.actual_coverage
    recorder.save(plan_path.with_name(f"{plan_path.stem}{MANIFEST_SUFFIX}"))
    emit(summary)
    return 0
