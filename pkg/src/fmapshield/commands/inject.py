"""`fmapshield inject`: run one fault-injection campaign and persist its records."""

import argparse
from pathlib import Path

from fmapshield.codecs.json_codec import load_json
from fmapshield.codecs.model_codec import load_model
from fmapshield.codecs.table_codec import write_records
from fmapshield.commands.common import (
    MANIFEST_SUFFIX,
    RunRecorder,
    add_dataset_arguments,
    emit,
    load_input_dataset,
    load_profile,
    load_split,
    out_dir,
    parse_fmap,
    split_ids,
)
from fmapshield.config import settings
from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.campaign import (
    CampaignConfig,
    CampaignFile,
    DatasetSplit,
    ErrorModel,
    Outcome,
)
from fmapshield.services.injector import run_campaign


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "inject",
        parents=[common],
        help="run a fault-injection campaign",
        description=(
            "Inject single-neuron errors into every fmap (or --fmap subset) and record the "
            "golden and injected outcome of each. A --config file replaces the model, "
            "dataset, profile and campaign flags."
        ),
    )
    parser.add_argument("--config", type=Path, help="campaign JSON file")
    parser.add_argument("--model", type=Path)
    add_dataset_arguments(parser, required=False)
    parser.add_argument("--profile", type=Path, help="range profile (default: OUT/profile.json)")
    parser.add_argument("--split-file", type=Path, help="ES/TS split (default: OUT/split.json)")
    parser.add_argument("--error-model", type=ErrorModel, choices=list(ErrorModel))
    parser.add_argument("--inj-per-fmap", type=int, default=256)
    parser.add_argument("--split", type=DatasetSplit, choices=list(DatasetSplit), default="ts")
    parser.add_argument("--exhaustive", action="store_true", help="enumerate every site")
    parser.add_argument("--fmap", type=parse_fmap, action="append", help="layer:channel")
    parser.add_argument("--records-out", type=Path, help="record CSV path")
    parser.set_defaults(handler=run)


def _campaign(args: argparse.Namespace, recorder: RunRecorder) -> CampaignFile:
    if args.config is not None:
        recorder.add_input("config", args.config)
        return load_json(args.config, CampaignFile)
    if args.model is None or args.dataset is None or args.error_model is None:
        raise InvalidRequestError("inject needs --config or --model, --dataset and --error-model")
    config = CampaignConfig(
        error_model=args.error_model,
        injections_per_fmap=args.inj_per_fmap,
        split=args.split,
        master_seed=recorder.derive(f"inject-{args.split}-{args.error_model}"),
        fmaps=args.fmap,
        exhaustive=args.exhaustive,
    )
    return CampaignFile(
        model=args.model,
        dataset=args.dataset,
        labels=args.labels,
        profile=args.profile,
        campaign=config,
    )


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("inject", args)
    target_dir = out_dir(args)
    campaign = _campaign(args, recorder)
    config = campaign.campaign
    with recorder.stage("load"):
        net = load_model(campaign.model)
        recorder.add_input("model", campaign.model)
        args.dataset, args.labels = campaign.dataset, campaign.labels
        dataset = load_input_dataset(args, recorder)
        profile = load_profile(campaign.profile or target_dir / "profile.json", recorder)
        split = load_split(args.split_file or target_dir / "split.json", recorder)
    with recorder.stage("campaign"):
        records = run_campaign(
            net, dataset, split_ids(split, config.split), config, profile, threads=settings.threads
        )
    suffix = "-exhaustive" if config.exhaustive else ""
    name = f"records-{config.split}-{config.error_model}{suffix}.csv"
    target = args.records_out or target_dir / name
    write_records(recorder.add_output(target), records, recorder.hash)
    recorder.save(target.with_name(f"{target.stem}{MANIFEST_SUFFIX}"))
    emit(
        {
            "records": target,
            "injections": len(records),
            "mismatches": sum(r.outcome == Outcome.MISMATCH for r in records),
        }
    )
    return 0
