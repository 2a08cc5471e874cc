"""Exception hierarchy. Every error carries the CLI exit code it maps to."""


class FmapShieldError(Exception):
    exit_code: int = 1
    category: str = "error"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InvalidRequestError(FmapShieldError):
    """A precondition of an operation was violated."""

    exit_code = 6
    category = "invalid request"


class ShapeMismatchError(InvalidRequestError):
    def __init__(self, layer: int | None, detail: str):
        where = "input" if layer is None else f"layer {layer}"
        super().__init__(f"{where}: {detail}")
        self.layer = layer


class NonFiniteInputError(InvalidRequestError):
    pass


class InputFileError(FmapShieldError):
    """File missing or unreadable."""

    exit_code = 3
    category = "unreadable file"


class FormatError(FmapShieldError):
    """File readable but corrupt or truncated."""

    exit_code = 5
    category = "corrupt file"

    def __init__(self, detail: str, offset: int | None = None):
        self.reason = detail
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        super().__init__(detail)
        self.offset = offset


class SchemaVersionError(FmapShieldError):
    exit_code = 4
    category = "schema version mismatch"


class TrainingDivergedError(FmapShieldError):
    exit_code = 7
    category = "numerical divergence"


EXIT_CODES = {
    0: "success",
    1: "unexpected error",
    2: "usage error (unknown flag or bad argument)",
    InputFileError.exit_code: InputFileError.category,
    SchemaVersionError.exit_code: SchemaVersionError.category,
    FormatError.exit_code: FormatError.category,
    InvalidRequestError.exit_code: InvalidRequestError.category,
    TrainingDivergedError.exit_code: TrainingDivergedError.category,
}
