"""Versioned CSV tables.

Every file starts with one header line naming its kind, the table schema version,
the hash of the run manifest that produced it and optional key=value metadata:

    # fmapshield-records v1 manifest=3f2a9c01d4e5b6a7 error_model=fxp-flip

The rest is a plain CSV body. Floats are written in shortest round-trip form and
read back with pandas' round-trip parser, so values survive bit-exactly.
"""

import io
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TypeVar

import pandas as pd
from pydantic import BaseModel, ValidationError

from fmapshield.core.errors import FormatError, InputFileError, SchemaVersionError
from fmapshield.schemas.analysis import (
    ConvergencePoint,
    CoveragePoint,
    CurveDistance,
    RuntimeEstimate,
    VulnCurve,
)
from fmapshield.schemas.campaign import InjectionRecord
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.protection import EfficacyRecord
from fmapshield.schemas.vulnerability import (
    FmapVulnerability,
    HeuristicKind,
    HeuristicProfile,
    LayerVulnerability,
    VulnerabilityTable,
)

logger = logging.getLogger(__name__)

TABLE_SCHEMA_VERSION = 1
HEADER_PREFIX = "# fmapshield-"
PROP_PREFIX = "prop_"

Row = TypeVar("Row", bound=BaseModel)


@dataclass(frozen=True)
class TableHeader:
    kind: str
    version: int
    manifest: str
    meta: dict[str, str] = field(default_factory=dict)

    def render(self) -> str:
        parts = [f"{HEADER_PREFIX}{self.kind}", f"v{self.version}", f"manifest={self.manifest}"]
        parts += [f"{key}={value}" for key, value in self.meta.items()]
        return " ".join(parts)


def _meta_value(value) -> str:
    text = repr(value) if isinstance(value, float) else str(value)
    if not text or any(c.isspace() for c in text):
        raise ValueError(f"metadata value {text!r} must be a non-empty token")
    return text


def parse_header(line: str) -> TableHeader:
    if not line.startswith(HEADER_PREFIX):
        raise FormatError("missing fmapshield table header", 0)
    tokens = line[len(HEADER_PREFIX) :].split()
    if len(tokens) < 3 or not tokens[1].startswith("v") or not tokens[1][1:].isdigit():
        raise FormatError(f"malformed table header {line.strip()!r}", 0)
    meta = {}
    for token in tokens[2:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise FormatError(f"malformed header field {token!r}", 0)
        meta[key] = value
    manifest = meta.pop("manifest", "")
    return TableHeader(kind=tokens[0], version=int(tokens[1][1:]), manifest=manifest, meta=meta)


def write_frame(
    path: Path,
    kind: str,
    frame: pd.DataFrame,
    manifest_hash: str,
    meta: Mapping[str, object] | None = None,
) -> None:
    path = Path(path)
    header = TableHeader(
        kind=kind,
        version=TABLE_SCHEMA_VERSION,
        manifest=manifest_hash,
        meta={key: _meta_value(value) for key, value in (meta or {}).items()},
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(header.render() + "\n")
        frame.to_csv(handle, index=False, lineterminator="\n")
    logger.debug(f"Wrote {len(frame)} {kind} rows to {path}")


def read_header(path: Path) -> TableHeader:
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as handle:
            first = handle.readline()
    except (OSError, UnicodeDecodeError) as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from exc
    try:
        return parse_header(first)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.reason}", exc.offset) from exc


def read_frame(
    path: Path, kind: str, columns: Iterable[str] = ()
) -> tuple[TableHeader, pd.DataFrame]:
    """Header and body of a table of `kind`; missing `columns` are a format error."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from exc
    first, _, body = text.partition("\n")
    try:
        header = parse_header(first)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.reason}", exc.offset) from exc
    if header.kind != kind:
        raise FormatError(f"{path}: expected a {kind} table, found {header.kind}", 0)
    if header.version != TABLE_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: table schema v{header.version}, expected v{TABLE_SCHEMA_VERSION}"
        )
    try:
        frame = pd.read_csv(io.StringIO(body), float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise FormatError(f"{path}: unreadable CSV body: {exc}", len(first) + 1) from exc
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise FormatError(f"{path}: missing columns {missing}")
    return header, frame


def _frame(rows: Sequence[dict], columns: Sequence[str]) -> pd.DataFrame:
    """Integer columns with gaps become nullable ints instead of floats."""
    frame = pd.DataFrame(list(rows), columns=list(columns))
    integral = {}
    for column in columns:
        values = [row[column] for row in rows if row[column] is not None]
        if values and all(isinstance(v, int) and not isinstance(v, bool) for v in values):
            integral[column] = "Int64"
    return frame.astype(integral)


def _records(frame: pd.DataFrame) -> list[dict]:
    frame = frame.astype(object).where(frame.notna(), None)
    return frame.to_dict(orient="records")


def _validate(path: Path, model: type[Row], rows: list[dict]) -> list[Row]:
    try:
        return [model.model_validate(row) for row in rows]
    except ValidationError as exc:
        first = exc.errors()[0]
        raise FormatError(f"{path}: invalid field {first['loc']}: {first['msg']}") from exc


def write_models(
    path: Path,
    kind: str,
    model: type[Row],
    rows: Sequence[Row],
    manifest_hash: str,
    meta: Mapping[str, object] | None = None,
) -> None:
    columns = list(model.model_fields)
    frame = _frame([row.model_dump(mode="json") for row in rows], columns)
    write_frame(path, kind, frame, manifest_hash, meta)


def read_models(path: Path, kind: str, model: type[Row]) -> tuple[TableHeader, list[Row]]:
    header, frame = read_frame(path, kind, columns=model.model_fields)
    return header, _validate(Path(path), model, _records(frame))


# Injection records


def write_records(path: Path, records: Sequence[InjectionRecord], manifest_hash: str) -> None:
    write_models(path, "records", InjectionRecord, records, manifest_hash)


def read_records(path: Path) -> list[InjectionRecord]:
    _, records = read_models(path, "records", InjectionRecord)
    return records


# Vulnerability tables


def write_table(path: Path, table: VulnerabilityTable, manifest_hash: str) -> None:
    metrics = list(table.fmaps[0].prop_p) if table.fmaps else [table.metric]
    rows = []
    for row in table.fmaps:
        values = {
            "layer": row.layer, "channel": row.channel, "macs": row.macs, "orig_p": row.orig_p
        }
        values |= {f"{PROP_PREFIX}{name}": row.prop_p[name] for name in metrics}
        values |= {"v_fmap": row.v_fmap, "rel_v": row.rel_v}
        rows.append(values)
    columns = ["layer", "channel", "macs", "orig_p"]
    columns += [f"{PROP_PREFIX}{name}" for name in metrics] + ["v_fmap", "rel_v"]
    meta = {
        "metric": table.metric,
        "v_cnn": float(table.v_cnn),
        "dense_mac_fraction": float(table.dense_mac_fraction),
        "rel_v_defined": table.rel_v_defined,
    }
    write_frame(path, "vulnerability", pd.DataFrame(rows, columns=columns), manifest_hash, meta)


def read_table(path: Path) -> VulnerabilityTable:
    header, frame = read_frame(
        path, "vulnerability", columns=("layer", "channel", "macs", "orig_p", "v_fmap", "rel_v")
    )
    for key in ("metric", "v_cnn", "dense_mac_fraction", "rel_v_defined"):
        if key not in header.meta:
            raise FormatError(f"{path}: header lacks {key}", 0)
    metrics = [c[len(PROP_PREFIX) :] for c in frame.columns if c.startswith(PROP_PREFIX)]
    rows = []
    for values in _records(frame):
        values["prop_p"] = {name: values.pop(f"{PROP_PREFIX}{name}") for name in metrics}
        rows.append(values)
    try:
        return VulnerabilityTable(
            metric=header.meta["metric"],
            fmaps=_validate(Path(path), FmapVulnerability, rows),
            v_cnn=float(header.meta["v_cnn"]),
            dense_mac_fraction=float(header.meta["dense_mac_fraction"]),
            rel_v_defined=header.meta["rel_v_defined"] == "True",
        )
    except (ValidationError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent vulnerability table: {exc}") from exc


def write_layers(path: Path, layers: Sequence[LayerVulnerability], manifest_hash: str) -> None:
    write_models(path, "layers", LayerVulnerability, layers, manifest_hash)


# Heuristic scores


def write_heuristics(path: Path, profile: HeuristicProfile, manifest_hash: str) -> None:
    kinds = list(profile.scores)
    fmaps = sorted(next(iter(profile.scores.values()))) if kinds else []
    rows = [
        {"layer": f.layer, "channel": f.channel} | {str(k): profile.scores[k][f] for k in kinds}
        for f in fmaps
    ]
    columns = ["layer", "channel"] + [str(kind) for kind in kinds]
    meta = {
        "sample_count": profile.sample_count,
        "skipped_gain_terms": profile.skipped_gain_terms,
    }
    write_frame(path, "heuristics", pd.DataFrame(rows, columns=columns), manifest_hash, meta)


def read_heuristics(path: Path) -> HeuristicProfile:
    header, frame = read_frame(path, "heuristics", columns=("layer", "channel"))
    try:
        kinds = [HeuristicKind(c) for c in frame.columns if c not in ("layer", "channel")]
        sample_count = int(header.meta["sample_count"])
        skipped = int(header.meta.get("skipped_gain_terms", 0))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad heuristics table: {exc}") from exc
    pairs = zip(frame["layer"], frame["channel"], strict=True)
    fmaps = [FmapId(int(layer), int(channel)) for layer, channel in pairs]
    scores = {
        kind: {fmap: float(v) for fmap, v in zip(fmaps, frame[str(kind)], strict=True)}
        for kind in kinds
    }
    return HeuristicProfile(sample_count=sample_count, scores=scores, skipped_gain_terms=skipped)


# Curves and comparison outputs


def write_curve(path: Path, name: str, curve: VulnCurve, manifest_hash: str) -> None:
    rows = [
        {"rank": rank, "layer": fmap.layer, "channel": fmap.channel, "cumulative": value}
        for rank, (fmap, value) in enumerate(zip(curve.fmap_order, curve.cumulative, strict=True))
    ]
    frame = pd.DataFrame(rows, columns=["rank", "layer", "channel", "cumulative"])
    write_frame(path, "curve", frame, manifest_hash, {"name": name})


def read_curve(path: Path) -> VulnCurve:
    _, frame = read_frame(path, "curve", columns=("rank", "layer", "channel", "cumulative"))
    frame = frame.sort_values("rank")
    pairs = zip(frame["layer"], frame["channel"], strict=True)
    order = [FmapId(int(layer), int(channel)) for layer, channel in pairs]
    values = [float(v) for v in frame["cumulative"]]
    if any(math.isnan(v) for v in values):
        raise FormatError(f"{path}: curve has empty cumulative values")
    return VulnCurve(fmap_order=order, cumulative=values)


def write_convergence(path: Path, points: Sequence[ConvergencePoint], manifest_hash: str) -> None:
    write_models(path, "convergence", ConvergencePoint, points, manifest_hash)


def write_distances(path: Path, distances: Sequence[CurveDistance], manifest_hash: str) -> None:
    write_models(path, "distances", CurveDistance, distances, manifest_hash)


def write_coverage_curve(
    path: Path, points: Sequence[CoveragePoint], manifest_hash: str
) -> None:
    rows = [
        {
            "fmap_count": p.fmap_count,
            "layer": p.fmap.layer if p.fmap is not None else None,
            "channel": p.fmap.channel if p.fmap is not None else None,
            "predicted_coverage": p.predicted_coverage,
            "mac_overhead_fraction": p.mac_overhead_fraction,
        }
        for p in points
    ]
    columns = ["fmap_count", "layer", "channel", "predicted_coverage", "mac_overhead_fraction"]
    write_frame(path, "coverage", _frame(rows, columns), manifest_hash)


def read_coverage_curve(path: Path) -> list[CoveragePoint]:
    columns = ("fmap_count", "layer", "channel", "predicted_coverage", "mac_overhead_fraction")
    _, frame = read_frame(path, "coverage", columns=columns)
    points = []
    for row in _records(frame):
        fmap = None if row["layer"] is None else FmapId(int(row["layer"]), int(row["channel"]))
        points.append(
            CoveragePoint(
                fmap_count=int(row["fmap_count"]),
                fmap=fmap,
                predicted_coverage=row["predicted_coverage"],
                mac_overhead_fraction=row["mac_overhead_fraction"],
            )
        )
    return points


# Protection


def write_efficacy(path: Path, rows: Sequence[EfficacyRecord], manifest_hash: str) -> None:
    write_models(path, "efficacy", EfficacyRecord, rows, manifest_hash)


def read_efficacy(path: Path) -> list[EfficacyRecord]:
    _, rows = read_models(path, "efficacy", EfficacyRecord)
    return rows


ROW_MODELS: dict[str, type[BaseModel]] = {
    "records": InjectionRecord,
    "efficacy": EfficacyRecord,
    "convergence": ConvergencePoint,
    "distances": CurveDistance,
    "layers": LayerVulnerability,
    "runtime": RuntimeEstimate,
}


def validate_table(path: Path) -> tuple[TableHeader, int]:
    """Parse a table of any kind with its own reader; returns the header and row count."""
    header = read_header(path)
    if header.kind in ROW_MODELS:
        _, rows = read_models(path, header.kind, ROW_MODELS[header.kind])
        return header, len(rows)
    match header.kind:
        case "vulnerability":
            count = len(read_table(path).fmaps)
        case "heuristics":
            scores = read_heuristics(path).scores
            count = len(next(iter(scores.values()))) if scores else 0
        case "curve":
            count = len(read_curve(path).cumulative)
        case "coverage":
            count = len(read_coverage_curve(path))
        case _:
            raise FormatError(f"{path}: unknown table kind {header.kind!r}", 0)
    return header, count
