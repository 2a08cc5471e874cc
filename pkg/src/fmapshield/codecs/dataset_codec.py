"""Image datasets: IDX files, the raw FMDS fallback and a built-in synthetic digit set.

Raw FMDS layout (all little-endian):

    b"FMDS" | count u32 | C u32 | H u32 | W u32
    count x ( label u32 | C*H*W float32 pixels, row-major )
"""

import gzip
import hashlib
import logging
import struct
from pathlib import Path

import numpy as np

from fmapshield.core.errors import FormatError, InputFileError, InvalidRequestError
from fmapshield.core.seeding import stage_rng
from fmapshield.schemas.dataset import Dataset

logger = logging.getLogger(__name__)

RAW_MAGIC = b"FMDS"
RAW_HEADER = struct.Struct("<4sIIII")
IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {dtype.newbyteorder(">"): code for code, dtype in IDX_TYPES.items()}

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
SYNTHETIC_SIZE = 12


def _glyph(digit: int) -> np.ndarray:
    return np.array([[int(c) for c in row] for row in _GLYPHS[digit]], dtype=np.float32)


def synthetic_digits(count: int, seed: int = 0) -> Dataset:
    """Noisy 5x7 digit glyphs at random offsets on a 12x12 canvas, balanced over 10 classes."""
    if count < 1:
        raise InvalidRequestError("synthetic dataset needs at least one image")
    rng = stage_rng(seed, "synthetic-digits")
    labels = rng.permutation(np.arange(count) % 10)
    images = np.zeros((count, 1, SYNTHETIC_SIZE, SYNTHETIC_SIZE), dtype=np.float32)
    glyphs = {digit: _glyph(digit) for digit in _GLYPHS}
    for index, label in enumerate(labels):
        top = int(rng.integers(0, SYNTHETIC_SIZE - 7 + 1))
        left = int(rng.integers(0, SYNTHETIC_SIZE - 5 + 1))
        brightness = rng.uniform(0.6, 1.0)
        images[index, 0, top : top + 7, left : left + 5] = glyphs[int(label)] * brightness
    images += rng.normal(0.0, 0.1, size=images.shape).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    digest = hashlib.sha256(f"synthetic:{count}:{seed}".encode()).hexdigest()
    return Dataset(images, labels.astype(np.int64), name=f"synthetic-{count}", digest=digest)


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as handle:
                return handle.read()
        return path.read_bytes()
    except (OSError, EOFError) as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from exc


def decode_idx(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in IDX_TYPES:
        raise FormatError(f"not an IDX file (magic {data[:4].hex() or 'missing'})", 0)
    dtype, ndim = IDX_TYPES[data[2]], data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("IDX header truncated", len(data))
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    size = int(np.prod(dims)) * dtype.itemsize
    if len(data) < header + size:
        raise FormatError(f"IDX body truncated: need {header + size} bytes", len(data))
    if len(data) > header + size:
        raise FormatError("trailing bytes after IDX body", header + size)
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def read_idx(path: Path) -> np.ndarray:
    try:
        return decode_idx(_read_bytes(path))
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.reason}", exc.offset) from exc


def write_idx(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    big = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    if big not in IDX_CODES:
        raise InvalidRequestError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, IDX_CODES[big], array.ndim])
    header += np.asarray(array.shape, dtype=">u4").tobytes()
    Path(path).write_bytes(header + array.astype(big).tobytes())


def _pixels(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    return raw.astype(np.float32)


def load_idx_dataset(images_path: Path, labels_path: Path) -> Dataset:
    raw = read_idx(images_path)
    labels = read_idx(labels_path)
    if raw.ndim == 3:
        raw = raw[:, None]
    if raw.ndim != 4 or labels.ndim != 1:
        raise FormatError(
            f"expected (N, H, W) images and (N,) labels, got {raw.shape}, {labels.shape}"
        )
    if raw.shape[0] != labels.shape[0]:
        raise FormatError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    digest = hashlib.sha256(_read_bytes(images_path) + _read_bytes(labels_path)).hexdigest()
    name = Path(images_path).name
    return Dataset(_pixels(raw), labels.astype(np.int64), name=name, digest=digest)


def decode_raw(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(data) < RAW_HEADER.size:
        raise FormatError("raw dataset header truncated", len(data))
    magic, count, channels, height, width = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad raw dataset magic {magic!r}", 0)
    pixels = channels * height * width
    record = np.dtype([("label", "<u4"), ("pixels", "<f4", (pixels,))])
    expected = RAW_HEADER.size + count * record.itemsize
    if len(data) < expected:
        done = (len(data) - RAW_HEADER.size) // record.itemsize
        raise FormatError(f"raw dataset truncated after {done} of {count} samples", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after raw dataset", expected)
    rows = np.frombuffer(data, dtype=record, count=count, offset=RAW_HEADER.size)
    images = rows["pixels"].reshape(count, channels, height, width).astype(np.float32)
    if not np.all(np.isfinite(images)):
        bad = int(np.flatnonzero(~np.isfinite(images).reshape(count, -1).all(axis=1))[0])
        raise FormatError("non-finite pixel values", RAW_HEADER.size + bad * record.itemsize)
    return images, rows["label"].astype(np.int64)


def write_raw(path: Path, dataset: Dataset) -> None:
    count, channels, height, width = dataset.images.shape
    record = np.dtype([("label", "<u4"), ("pixels", "<f4", (channels * height * width,))])
    rows = np.empty(count, dtype=record)
    rows["label"] = dataset.labels
    rows["pixels"] = dataset.images.reshape(count, -1)
    header = RAW_HEADER.pack(RAW_MAGIC, count, channels, height, width)
    Path(path).write_bytes(header + rows.tobytes())


def _sibling_labels(images_path: Path) -> Path:
    name = images_path.name
    if "images" not in name:
        raise InvalidRequestError(f"{images_path}: IDX images need a labels file")
    return images_path.with_name(name.replace("images", "labels").replace("idx3", "idx1"))


def load_dataset(source: str | Path, labels: Path | None = None) -> Dataset:
    """`synthetic:N[:seed]`, an IDX image file (labels alongside) or a raw FMDS file."""
    text = str(source)
    if text.startswith("synthetic:"):
        parts = text.split(":")
        try:
            count = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError) as exc:
            raise InvalidRequestError(f"bad synthetic dataset source {text!r}") from exc
        return synthetic_digits(count, seed)
    path = Path(source)
    data = _read_bytes(path)
    if data[:4] == RAW_MAGIC:
        try:
            images, label_array = decode_raw(data)
        except FormatError as exc:
            raise FormatError(f"{path}: {exc.reason}", exc.offset) from exc
        digest = hashlib.sha256(data).hexdigest()
        dataset = Dataset(images, label_array, name=path.name, digest=digest)
    else:
        dataset = load_idx_dataset(path, labels or _sibling_labels(path))
    logger.info(f"Loaded {len(dataset)} images from {path}")
    return dataset
