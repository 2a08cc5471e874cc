"""`fmapshield calibrate`: INT8 range profile and the ES/TS split."""

import argparse
from pathlib import Path

from fmapshield.codecs.json_codec import save_json
from fmapshield.codecs.model_codec import load_model
from fmapshield.commands.common import (
    MANIFEST_SUFFIX,
    RunRecorder,
    add_dataset_arguments,
    emit,
    load_input_dataset,
    out_dir,
)
from fmapshield.services.analysis import split_dataset
from fmapshield.services.quantizer import QuantScheme, calibrate, evaluate_accuracy


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "calibrate",
        parents=[common],
        help="profile fmap ranges and split the dataset",
        description=(
            "Record per-fmap activation ranges, then split the images that both the float "
            "and the fake-quantized network classify correctly 80/20 into ES and TS."
        ),
    )
    parser.add_argument("--model", type=Path, required=True)
    add_dataset_arguments(parser)
    parser.add_argument("--float-only", action="store_true", help="split on float accuracy only")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("calibrate", args)
    target = out_dir(args)
    with recorder.stage("load"):
        net = load_model(args.model)
        recorder.add_input("model", args.model)
        dataset = load_input_dataset(args, recorder)
    with recorder.stage("calibrate"):
        profile = calibrate(net, dataset.images)
    scheme = QuantScheme.from_profile(net, profile)
    with recorder.stage("split"):
        split = split_dataset(
            net, dataset, recorder.derive("split"), quant=None if args.float_only else scheme
        )
    accuracy = evaluate_accuracy(net, dataset, scheme)
    for name, document in (("profile", profile), ("split", split), ("accuracy", accuracy)):
        save_json(recorder.add_output(target / f"{name}.json"), document)
    recorder.save(target / f"calibrate{MANIFEST_SUFFIX}")
    emit(
        {
            "fmaps": len(profile.fmaps),
            "es": len(split.es_image_ids),
            "ts": len(split.ts_image_ids),
            "accuracy": accuracy.model_dump(),
        }
    )
    return 0
