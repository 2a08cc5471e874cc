"""JSON documents backed by pydantic models (profiles, plans, splits, manifests)."""

import json
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError

from fmapshield.core.errors import FormatError, InputFileError, SchemaVersionError

Model = TypeVar("Model", bound=BaseModel)


def save_json(path: Path, document: BaseModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document.model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_json(path: Path, model: type[Model], schema_version: int | None = None) -> Model:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc.msg}", exc.pos) from exc
    if schema_version is not None and isinstance(data, dict):
        found = data.get("schema_version")
        if found != schema_version:
            raise SchemaVersionError(f"{path}: schema v{found}, expected v{schema_version}")
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise FormatError(f"{path}: invalid field {first['loc']}: {first['msg']}") from exc
