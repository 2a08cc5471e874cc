"""Helpers shared by the CLI stages: run manifests, input loading, result printing."""

import argparse
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path

from fmapshield.codecs.dataset_codec import load_dataset
from fmapshield.codecs.json_codec import load_json, save_json
from fmapshield.config import settings
from fmapshield.core.errors import InputFileError
from fmapshield.core.seeding import derive_seed
from fmapshield.schemas.analysis import SplitSpec
from fmapshield.schemas.campaign import DatasetSplit
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.manifest import RunManifest, config_hash
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.quant import PROFILE_SCHEMA_VERSION, RangeProfile

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"

# flags that never change what a stage computes
_RUNTIME_KEYS = frozenset(
    {"handler", "threads", "log_level", "out", "model_out", "records_out", "plan_out"}
)


def add_dataset_arguments(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument(
        "--dataset",
        required=required,
        help="IDX image file, raw FMDS file or synthetic:N[:seed]",
    )
    parser.add_argument("--labels", type=Path, help="IDX label file (default: beside images)")


def master_seed(args: argparse.Namespace) -> int:
    return settings.seed if getattr(args, "seed", None) is None else args.seed


def out_dir(args: argparse.Namespace) -> Path:
    path = Path(getattr(args, "out", None) or settings.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def file_digest(path: Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from exc


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, list | tuple):
        return [_plain(item) for item in value]
    return value


class RunRecorder:
    """Collects what one CLI stage read, wrote and how long it took."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.seed = master_seed(args)
        self.config = {
            key: _plain(value)
            for key, value in sorted(vars(args).items())
            if key not in _RUNTIME_KEYS
        }
        self.config["seed"] = self.seed
        self.hash = config_hash(self.config)
        self.inputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []

    def derive(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def add_input(self, name: str, path: Path | None = None, digest: str | None = None) -> None:
        self.inputs[name] = digest if digest is not None else file_digest(path)

    def add_dataset(self, dataset: Dataset) -> None:
        self.inputs[f"dataset:{dataset.name}"] = dataset.digest

    def add_output(self, path: Path) -> Path:
        self.outputs.append(Path(path).name)
        return path

    @contextmanager
    def stage(self, name: str):
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - started, 6)
            logger.debug(f"Stage {name} took {self.timings[name]}s")

    def save(self, path: Path) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            config=self.config,
            config_hash=self.hash,
            master_seed=self.seed,
            input_digests=self.inputs,
            stage_seconds=self.timings,
            outputs=self.outputs,
        )
        save_json(path, manifest)
        logger.info(
            f"{self.command} finished",
            extra={"manifest": str(path), "config_hash": self.hash, "outputs": self.outputs},
        )
        return manifest


def load_input_dataset(args: argparse.Namespace, recorder: RunRecorder) -> Dataset:
    dataset = load_dataset(args.dataset, args.labels)
    recorder.add_dataset(dataset)
    return dataset


def load_profile(path: Path, recorder: RunRecorder) -> RangeProfile:
    recorder.add_input("profile", path)
    return load_json(path, RangeProfile, schema_version=PROFILE_SCHEMA_VERSION)


def load_split(path: Path, recorder: RunRecorder) -> SplitSpec:
    recorder.add_input("split", path)
    return load_json(path, SplitSpec)


def split_ids(split: SplitSpec, which: DatasetSplit) -> list[int]:
    return split.es_image_ids if which == DatasetSplit.ES else split.ts_image_ids


def emit(result: dict) -> None:
    """Print a stage summary as one JSON document on stdout."""
    print(json.dumps(result, indent=2, sort_keys=True, default=str))


def parse_fmap(text: str) -> FmapId:
    """`layer:channel`, e.g. `0:3`."""
    layer, sep, channel = text.partition(":")
    try:
        if not sep:
            raise ValueError(text)
        return FmapId(int(layer), int(channel))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected layer:channel, got {text!r}") from exc
