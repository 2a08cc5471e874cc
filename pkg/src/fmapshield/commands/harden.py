"""`fmapshield harden`: duplicate the filters named by a plan."""

import argparse
from pathlib import Path

from fmapshield.codecs.json_codec import load_json
from fmapshield.codecs.model_codec import load_model, save_model
from fmapshield.commands.common import MANIFEST_SUFFIX, RunRecorder, emit, out_dir
from fmapshield.schemas.analysis import CoveragePlan
from fmapshield.services.protection import harden


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "harden",
        parents=[common],
        help="apply selective filter duplication",
        description="Append one shadow filter per planned fmap and save the hardened model.",
    )
    parser.add_argument("--model", type=Path, required=True)
    parser.add_argument("--plan", type=Path, help="plan JSON (default: OUT/plan.json)")
    parser.add_argument("--tolerance", type=float, default=0.0, help="detection threshold")
    parser.add_argument("--model-out", type=Path, help="default: OUT/hardened.json")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("harden", args)
    target = out_dir(args)
    plan_path = args.plan or target / "plan.json"
    recorder.add_input("model", args.model)
    recorder.add_input("plan", plan_path)
    net = load_model(args.model)
    hardened = harden(net, load_json(plan_path, CoveragePlan), args.tolerance)
    model_path = args.model_out or target / "hardened.json"
    save_model(hardened, recorder.add_output(model_path))
    recorder.save(model_path.with_name(f"{model_path.stem}{MANIFEST_SUFFIX}"))
    emit(
        {
            "model": model_path,
            "protected_fmaps": len(hardened.duplication),
            "channel_counts": hardened.channel_counts(),
        }
    )
    return 0
