"""Exception hierarchy shared across the pipeline.

Every error carries a machine-readable ``error_class`` so the HTTP layer and
the CLI can map failures onto stable exit codes without string matching.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 10
EXIT_STAGE = 20
EXIT_RESUME = 30
EXIT_AUTH = 40


class RelaytuneError(Exception):
    """Base class for all pipeline errors."""

    error_class = "stage"
    exit_code = EXIT_STAGE


class ConfigError(RelaytuneError):
    """Invalid or incomplete configuration; nothing was executed."""

    error_class = "config"
    exit_code = EXIT_CONFIG


class StageError(RelaytuneError):
    """A pipeline stage failed after starting."""

    error_class = "stage"
    exit_code = EXIT_STAGE


class MissingInputError(StageError):
    """A required input file or artifact does not exist."""

    error_class = "missing_input"


class DatasetFormatError(StageError):
    """A dataset file failed to parse or validate."""

    error_class = "dataset_format"

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:" if line is None else f"{path}:{line}: "
        super().__init__(prefix + message)


class HoldoutLeakError(StageError):
    """A training manifest referenced held-out test records."""

    error_class = "test_leak"


class ResumeError(RelaytuneError):
    """A run directory could not be resumed."""

    error_class = "resume"
    exit_code = EXIT_RESUME


class AuthError(RelaytuneError):
    """Provider credentials are missing or rejected."""

    error_class = "auth"
    exit_code = EXIT_AUTH
