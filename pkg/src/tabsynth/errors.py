"""Exception hierarchy.

Errors subclassing :class:`ValidationError` signal bad inputs or configuration
(the CLI maps them to exit code 2); everything else under
:class:`TabsynthError` is a runtime failure (exit code 1).
"""


class TabsynthError(Exception):
    """Base class for all package errors."""


class ValidationError(TabsynthError):
    """Invalid input, schema or configuration."""


class SchemaError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class FormatError(ValidationError):
    """Unreadable, truncated or version-mismatched file."""


class TransformError(TabsynthError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class TrainingError(TabsynthError):
    pass


class GlmError(TabsynthError):
    pass
