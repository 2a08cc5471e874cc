"""`fmapshield verify`: replay a campaign through the hardened model."""

import argparse
from pathlib import Path

from fmapshield.codecs.json_codec import save_json
from fmapshield.codecs.model_codec import load_hardened
from fmapshield.codecs.table_codec import read_records, write_efficacy
from fmapshield.commands.common import (
    MANIFEST_SUFFIX,
    RunRecorder,
    add_dataset_arguments,
    emit,
    load_input_dataset,
    load_profile,
    out_dir,
)
from fmapshield.services.protection import measure_protection_efficacy


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "verify",
        parents=[common],
        help="measure detection efficacy",
        description=(
            "Re-inject every recorded fault into the hardened model, hitting the primary or "
            "the shadow copy of protected fmaps, and report detection and residual mismatches."
        ),
    )
    parser.add_argument("--model", type=Path, help="hardened model (default: OUT/hardened.json)")
    add_dataset_arguments(parser)
    parser.add_argument("--records", type=Path, required=True, help="campaign record CSV")
    parser.add_argument("--profile", type=Path, help="needed for fxp-* records")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("verify", args)
    target = out_dir(args)
    model_path = args.model or target / "hardened.json"
    recorder.add_input("model", model_path)
    recorder.add_input("records", args.records)
    hnet = load_hardened(model_path)
    dataset = load_input_dataset(args, recorder)
    records = read_records(args.records)
    profile = None
    if records and records[0].error_model.quantized:
        profile = load_profile(args.profile or target / "profile.json", recorder)
    with recorder.stage("replay"):
        report, rows = measure_protection_efficacy(
            hnet, dataset, records, recorder.derive("verify"), profile
        )
    write_efficacy(recorder.add_output(target / "efficacy.csv"), rows, recorder.hash)
    save_json(recorder.add_output(target / "efficacy.json"), report)
    recorder.save(target / f"verify{MANIFEST_SUFFIX}")
    emit(report.model_dump())
    return 0
