"""`fmapshield estimate`: per-fmap vulnerability tables from injections and heuristics."""

import argparse
import time
from pathlib import Path

from fmapshield.codecs.json_codec import load_json
from fmapshield.codecs.model_codec import load_model
from fmapshield.codecs.table_codec import (
    read_records,
    write_heuristics,
    write_layers,
    write_models,
    write_table,
)
from fmapshield.commands.common import (
    MANIFEST_SUFFIX,
    RunRecorder,
    add_dataset_arguments,
    emit,
    load_input_dataset,
    load_profile,
    load_split,
    out_dir,
    split_ids,
)
from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.analysis import RuntimeEstimate, Technique
from fmapshield.schemas.campaign import DatasetSplit
from fmapshield.schemas.manifest import RunManifest
from fmapshield.schemas.quant import RangeProfile
from fmapshield.schemas.vulnerability import HeuristicKind, HeuristicProfile, Metric
from fmapshield.services.analysis import measure_pass_times, predict_runtime
from fmapshield.services.engine import count_macs
from fmapshield.services.metrics import (
    aggregate_to_layers,
    compose_vulnerability,
    compute_heuristics,
    group_by_fmap,
    prop_p_by_fmap,
)


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "estimate",
        parents=[common],
        help="compute vulnerability tables",
        description=(
            "Compose V_fmap = OrigP x PropP from campaign records (mismatch and delta-loss) "
            "and from the non-injection heuristics evaluated on one split."
        ),
    )
    parser.add_argument("--model", type=Path, required=True)
    parser.add_argument("--records", type=Path, help="campaign record CSV")
    add_dataset_arguments(parser, required=False)
    parser.add_argument("--split-file", type=Path, help="ES/TS split (default: OUT/split.json)")
    parser.add_argument("--split", type=DatasetSplit, choices=list(DatasetSplit), default="es")
    parser.add_argument(
        "--profile",
        type=Path,
        help="range profile that weights Gradient (default: OUT/profile.json if present)",
    )
    parser.add_argument(
        "--heuristic",
        type=HeuristicKind,
        choices=list(HeuristicKind),
        action="append",
        help="heuristic to evaluate (repeatable; default: all when --dataset is given)",
    )
    parser.add_argument("--runtime", action="store_true", help="time each technique")
    parser.add_argument("--tag", help="name used in output files (default: the split)")
    parser.set_defaults(handler=run)


def _campaign_seconds(records_path: Path) -> float | None:
    manifest_path = records_path.with_name(f"{records_path.stem}{MANIFEST_SUFFIX}")
    if not manifest_path.exists():
        return None
    return load_json(manifest_path, RunManifest).stage_seconds.get("campaign")


def _timed_heuristics(
    net, samples, kinds, ranges
) -> tuple[HeuristicProfile, dict[HeuristicKind, float]]:
    scores, seconds, skipped = {}, {}, 0
    for kind in kinds:
        started = time.perf_counter()
        profile = compute_heuristics(net, samples, [kind], ranges)
        seconds[kind] = time.perf_counter() - started
        scores[kind] = profile.scores[kind]
        skipped += profile.skipped_gain_terms
    return HeuristicProfile(len(samples), scores, skipped), seconds


def _ranges(args: argparse.Namespace, target: Path, recorder: RunRecorder) -> RangeProfile | None:
    if args.profile is not None:
        return load_profile(args.profile, recorder)
    default = target / "profile.json"
    return load_profile(default, recorder) if default.exists() else None


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("estimate", args)
    target = out_dir(args)
    tag = args.tag or str(args.split)
    if args.records is None and args.dataset is None:
        raise InvalidRequestError("estimate needs --records, --dataset or both")
    net = load_model(args.model)
    recorder.add_input("model", args.model)
    census = count_macs(net)
    written: dict[str, str] = {}

    def table_out(name: str, table) -> None:
        path = recorder.add_output(target / f"vuln-{tag}-{name}.csv")
        write_table(path, table, recorder.hash)
        layers = recorder.add_output(target / f"layers-{tag}-{name}.csv")
        write_layers(layers, aggregate_to_layers(table), recorder.hash)
        written[name] = str(path)

    records = []
    if args.records is not None:
        with recorder.stage("injection-metrics"):
            recorder.add_input("records", args.records)
            records = read_records(args.records)
            if not records:
                raise InvalidRequestError(f"{args.records} holds no records")
            prop_p = {metric: prop_p_by_fmap(records, metric) for metric in Metric}
        for metric in Metric:
            others = {str(m): prop_p[m] for m in Metric if m != metric}
            table_out(str(metric), compose_vulnerability(census, prop_p[metric], metric, others))

    estimates: list[RuntimeEstimate] = []
    if args.dataset is not None:
        dataset = load_input_dataset(args, recorder)
        split = load_split(args.split_file or target / "split.json", recorder)
        samples = dataset.subset(split_ids(split, args.split))
        kinds = args.heuristic or list(HeuristicKind)
        ranges = _ranges(args, target, recorder)
        with recorder.stage("heuristics"):
            if args.runtime:
                profile, seconds = _timed_heuristics(net, samples, kinds, ranges)
            else:
                profile, seconds = compute_heuristics(net, samples, kinds, ranges), {}
        write_heuristics(
            recorder.add_output(target / f"heuristics-{tag}.csv"), profile, recorder.hash
        )
        for kind, scores in profile.scores.items():
            table_out(str(kind), compose_vulnerability(census, scores, kind))
        if args.runtime:
            times = measure_pass_times(net, samples)
            for kind in kinds:
                estimates.append(
                    RuntimeEstimate(
                        technique=Technique(kind),
                        sample_count=len(samples),
                        predicted_seconds=predict_runtime(
                            Technique(kind), len(samples), times.forward_seconds,
                            times.backward_seconds, 0, len(census.per_fmap), net.class_count,
                        ),
                        measured_seconds=seconds[kind],
                    )
                )
            if records:
                per_fmap = min(len(group) for group in group_by_fmap(records).values())
                images = len({r.image_id for r in records})
                measured = _campaign_seconds(args.records)
                for metric in Metric:
                    estimates.append(
                        RuntimeEstimate(
                            technique=Technique(metric),
                            sample_count=images,
                            predicted_seconds=predict_runtime(
                                Technique(metric), images, times.forward_seconds,
                                times.backward_seconds, per_fmap, len(census.per_fmap),
                                net.class_count,
                            ),
                            measured_seconds=measured,
                        )
                    )
            path = recorder.add_output(target / f"runtime-{tag}.csv")
            write_models(path, "runtime", RuntimeEstimate, estimates, recorder.hash)
    recorder.save(target / f"estimate-{tag}{MANIFEST_SUFFIX}")
    emit({"tables": written, "runtime_rows": len(estimates)})
    return 0
