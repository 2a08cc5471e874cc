"""`fmapshield report`: merge every CSV artifact of an output directory into one summary."""

import argparse
import logging
from pathlib import Path

from fmapshield.codecs.json_codec import load_json, save_json
from fmapshield.codecs.table_codec import validate_table
from fmapshield.commands.common import MANIFEST_SUFFIX, emit, out_dir
from fmapshield.schemas.manifest import ArtifactSummary, RunManifest, RunReport

logger = logging.getLogger(__name__)


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "report",
        parents=[common],
        help="summarize an output directory",
        description="Validate every CSV under OUT against its schema and write OUT/report.json.",
    )
    parser.set_defaults(handler=run)


def build_report(directory: Path) -> RunReport:
    manifests = {
        path.name: load_json(path, RunManifest).config_hash
        for path in sorted(directory.glob(f"*{MANIFEST_SUFFIX}"))
    }
    known = set(manifests.values())
    artifacts = {}
    for path in sorted(directory.glob("*.csv")):
        header, rows = validate_table(path)
        artifacts[path.name] = ArtifactSummary(
            kind=header.kind,
            schema_version=header.version,
            manifest=header.manifest,
            rows=rows,
        )
    orphans = [name for name, a in artifacts.items() if a.manifest not in known]
    if orphans:
        logger.warning(f"{len(orphans)} artifacts reference no manifest in {directory}")
    return RunReport(artifacts=artifacts, manifests=manifests, orphans=orphans)


def run(args: argparse.Namespace) -> int:
    directory = out_dir(args)
    report = build_report(directory)
    save_json(directory / "report.json", report)
    emit({"artifacts": len(report.artifacts), "orphans": report.orphans})
    return 0
