"""Exception hierarchy shared by every module.

Each class carries the process exit code the command-line front end uses
when the error escapes a subcommand.
"""


class CycleLifeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CycleLifeError, ValueError):
    """Invalid run configuration or synthetic-data specification."""

    exit_code = 2

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DataError(CycleLifeError, ValueError):
    """Input data violates a contract (file schema, coverage, domain...)."""

    exit_code = 3


class DatasetLoadError(DataError):
    """A dataset file could not be read; the message names file and line."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class CycleLifeLabelError(DataError):
    pass


class MissingCycleError(DataError):
    pass


class CoverageError(DataError):
    pass


class FeatureDomainError(DataError):
    pass


class ConstantColumnError(DataError):
    def __init__(self, columns):
        super().__init__(
            "constant column(s) cannot be standardized, consider removing: "
            + ", ".join(columns)
        )
        self.columns = list(columns)


class SchemaError(DataError):
    pass


class IdentifiabilityError(DataError):
    """Design matrix (with intercept) is rank deficient."""

    def __init__(self, dependent_columns, rank, n_columns):
        super().__init__(
            f"design matrix rank {rank} < {n_columns} (intercept included); "
            f"linearly dependent columns: {', '.join(dependent_columns)}"
        )
        self.dependent_columns = list(dependent_columns)
        self.rank = rank


class ConvergenceError(CycleLifeError, RuntimeError):
    """Iterative solver hit its iteration cap.

    ``model`` holds the last iterate as a LinearModel and ``details`` the
    residual information at that point (KKT residual for elastic net,
    primal/dual residuals for ADMM).
    """

    exit_code = 4

    def __init__(self, message, model=None, **details):
        super().__init__(message)
        self.model = model
        self.details = details


class SynthError(DataError):
    pass
