"""Model files: a JSON manifest next to a little-endian float32 weights blob."""

import hashlib
import logging
from pathlib import Path

import numpy as np

from fmapshield.codecs.json_codec import load_json, save_json
from fmapshield.core.errors import FormatError, InputFileError, InvalidRequestError
from fmapshield.schemas.network import MODEL_SCHEMA_VERSION, DuplicationEntry, FmapId, ModelManifest
from fmapshield.services.engine import Network, make_network
from fmapshield.services.protection import HardenedNetwork

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f4")


def weights_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".weights")


def _encode(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()


def _blob(net: Network, hardened: HardenedNetwork | None) -> bytes:
    parts = []
    for layer in net.layers:
        if layer.weight is not None:
            parts += [_encode(layer.weight), _encode(layer.bias)]
    if hardened is not None:
        for fmap in sorted(hardened.duplication, key=hardened.duplication.get):
            layer = net.layers[fmap.layer]
            parts += [
                _encode(layer.weight[fmap.channel]),
                _encode(layer.bias[fmap.channel : fmap.channel + 1]),
            ]
    return b"".join(parts)


def save_model(model: Network | HardenedNetwork, path: Path) -> ModelManifest:
    """Write `path` (manifest) and its `.weights` blob; returns the manifest."""
    path = Path(path)
    hardened = model if isinstance(model, HardenedNetwork) else None
    net = hardened.base if hardened is not None else model
    blob = _blob(net, hardened)
    blob_path = weights_path(path)
    duplication = []
    tolerance = 0.0
    if hardened is not None:
        duplication = [
            DuplicationEntry(layer=fmap.layer, channel=fmap.channel, shadow_channel=shadow)
            for fmap, shadow in sorted(hardened.duplication.items(), key=lambda item: item[1])
        ]
        tolerance = hardened.tolerance
    manifest = ModelManifest(
        name=net.name,
        input_shape=net.input_shape,
        class_count=net.class_count,
        layers=[layer.config for layer in net.layers],
        weights_file=blob_path.name,
        weights_sha256=hashlib.sha256(blob).hexdigest(),
        duplication=duplication,
        detection_tolerance=tolerance,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    save_json(path, manifest)
    logger.info(f"Model saved to {path}", extra={"bytes": len(blob)})
    return manifest


def _take(blob: bytes, offset: int, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    end = offset + count * BLOB_DTYPE.itemsize
    if end > len(blob):
        raise FormatError(f"weights blob truncated: need {end} bytes, have {len(blob)}", offset)
    values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset).reshape(shape)
    if not np.all(np.isfinite(values)):
        raise FormatError("weights blob holds non-finite values", offset)
    return values.astype(np.float32), end


def _read(path: Path) -> tuple[ModelManifest, Network, bytes, int]:
    path = Path(path)
    manifest = load_json(path, ModelManifest, schema_version=MODEL_SCHEMA_VERSION)
    blob_path = path.parent / manifest.weights_file
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise InputFileError(f"cannot read weights {blob_path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest.weights_sha256:
        raise FormatError(f"{blob_path}: sha256 does not match the manifest", 0)
    params = {}
    offset = 0
    for index, config in enumerate(manifest.layers):
        if config.has_weights:
            weight, offset = _take(blob, offset, config.weight_shape)
            bias, offset = _take(blob, offset, config.bias_shape)
            params[index] = (weight, bias)
    try:
        net = make_network(
            manifest.layers, params, manifest.input_shape, manifest.class_count, manifest.name
        )
    except InvalidRequestError as exc:
        raise FormatError(f"{path}: inconsistent layer list: {exc.detail}") from exc
    if not manifest.duplication and offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in weights blob", offset)
    return manifest, net, blob, offset


def load_model(path: Path) -> Network:
    """Base network of a model file; shadow filters of a hardened model are skipped."""
    _, net, _, _ = _read(path)
    return net


def load_hardened(path: Path) -> HardenedNetwork:
    manifest, net, blob, offset = _read(path)
    duplication = {}
    for entry in manifest.duplication:
        fmap = FmapId(entry.layer, entry.channel)
        if fmap not in net.fmap_index:
            raise FormatError(f"{path}: duplication names unknown fmap {fmap}")
        primary = net.layers[entry.layer]
        weight, offset = _take(blob, offset, primary.config.weight_shape[1:])
        bias, offset = _take(blob, offset, (1,))
        same = np.array_equal(weight, primary.weight[entry.channel])
        if not same or bias[0] != primary.bias[entry.channel]:
            raise FormatError(f"shadow of {fmap} differs from its primary filter", offset)
        duplication[fmap] = entry.shadow_channel
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in weights blob", offset)
    try:
        return HardenedNetwork(net, duplication, manifest.detection_tolerance)
    except InvalidRequestError as exc:
        raise FormatError(f"{path}: {exc.detail}") from exc
