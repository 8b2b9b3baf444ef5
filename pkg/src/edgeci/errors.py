"""Shared exception types.

Errors that name a field or value carry it as an attribute so callers
(and the CLI) can report precisely what went wrong.
"""


class EdgeCiError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EdgeCiError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class ValidationError(ConfigError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SchemaError(EdgeCiError):
    """Base for observation-vs-schema validation failures."""


class MissingRequiredField(SchemaError):
    def __init__(self, name: str):
        super().__init__(f"missing required feature '{name}'")
        self.name = name


class OutOfBounds(SchemaError):
    def __init__(self, name: str, value: float, min_: float | None, max_: float | None):
        super().__init__(f"feature '{name}' value {value} outside [{min_}, {max_}]")
        self.name = name
        self.value = value
        self.min = min_
        self.max = max_


class TypeMismatch(SchemaError):
    def __init__(self, name: str, value: object):
        super().__init__(f"feature '{name}' is not a finite number: {value!r}")
        self.name = name
        self.value = value


class UnknownField(SchemaError):
    def __init__(self, name: str):
        super().__init__(f"unknown field '{name}' (strict schema mode)")
        self.name = name


class PayloadTooLarge(EdgeCiError):
    pass


class ColumnCountMismatch(EdgeCiError):
    pass


class NonNumericValue(EdgeCiError):
    def __init__(self, column: str, raw: str):
        super().__init__(f"column '{column}': non-numeric value {raw!r}")
        self.column = column
        self.raw = raw


class HeaderMismatch(EdgeCiError):
    pass


class SpecMismatch(EdgeCiError):
    pass


class DimensionMismatch(EdgeCiError):
    pass


class NonFiniteInput(EdgeCiError):
    pass


class InsufficientData(EdgeCiError):
    pass


class SingularSystem(EdgeCiError):
    pass


class FormatVersionUnsupported(EdgeCiError):
    def __init__(self, version: object):
        super().__init__(f"unsupported artifact format_version: {version!r}")
        self.version = version


class CorruptArtifact(EdgeCiError):
    pass


class UnboundPlaceholder(EdgeCiError):
    def __init__(self, placeholder: str):
        super().__init__(f"placeholder {{{{{placeholder}}}}} is not in the allowed set")
        self.placeholder = placeholder


class TemplateParseError(EdgeCiError):
    def __init__(self, file: str, cause: Exception):
        super().__init__(f"{file}: {cause}")
        self.file = file
        self.cause = cause


class LlmError(EdgeCiError):
    """Base for LLM transport failures; reason is a short operator-facing tag."""

    reason = "error"


class LlmTimeout(LlmError):
    reason = "timeout"


class HttpError(LlmError):
    reason = "http error"

    def __init__(self, status: int):
        super().__init__(f"LLM endpoint returned HTTP {status}")
        self.status = status
        self.reason = f"http {status}"


class MalformedResponse(LlmError):
    reason = "malformed response"


class MissingApiKey(LlmError):
    reason = "missing api key"


class RowNotFound(EdgeCiError):
    def __init__(self, row_id: int):
        super().__init__(f"row {row_id} not found")
        self.row_id = row_id


class NonFiniteTarget(EdgeCiError):
    pass


class NoCorrections(EdgeCiError):
    pass


class CommandTimeout(EdgeCiError):
    pass


class NoSamples(EdgeCiError):
    pass


class StageFailure(EdgeCiError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class DeployTimeout(EdgeCiError):
    pass


class TargetUnreachable(EdgeCiError):
    pass


class SchemaHashMismatch(EdgeCiError):
    pass


class BindError(EdgeCiError):
    pass
