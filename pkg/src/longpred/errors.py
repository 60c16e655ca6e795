"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit codes without inspecting exception types one by one:

    2  configuration / usage
    3  data, schema, or design problems
    4  numerical failure (non-convergence, conditioning)
    5  separation in the dichotomized model
    6  no rule satisfies the requested false-positive budget
"""


class LongpredError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(LongpredError):
    """Invalid run configuration (bad flag value, missing path, ...)."""

    exit_code = 2


class SchemaError(LongpredError):
    """Input file is missing required columns or has a malformed header."""

    exit_code = 3


class RecordError(LongpredError):
    """A data row violates a field invariant (e.g. non-positive CD4)."""

    exit_code = 3

    def __init__(self, message, row_index=None):
        super().__init__(message)
        self.row_index = row_index


class SubjectError(LongpredError):
    """A subject violates a structural invariant (e.g. no baseline row)."""

    exit_code = 3


class EmptyResponseError(LongpredError):
    """Subject has no post-baseline observations to predict."""

    exit_code = 3


class SingularDesignError(LongpredError):
    """Stacked fixed-effects design is rank deficient."""

    exit_code = 3

    def __init__(self, message, dependent_columns=()):
        super().__init__(message)
        self.dependent_columns = tuple(dependent_columns)


class NonConvergenceError(LongpredError):
    """Optimizer exhausted its iteration budget."""

    exit_code = 4

    def __init__(self, message, last_params=None, last_objective=None):
        super().__init__(message)
        self.last_params = last_params
        self.last_objective = last_objective


class ConditioningError(LongpredError):
    """A computed quantity violates a positivity/PSD requirement."""

    exit_code = 4


class BootstrapError(LongpredError):
    """Too many bootstrap replicates failed to fit."""

    exit_code = 4


class SeparationError(LongpredError):
    """Dichotomized response is perfectly predicted (or single-class)."""

    exit_code = 5


class NoFeasibleRuleError(LongpredError):
    """No ROC point satisfies the requested false-positive budget."""

    exit_code = 6


class NearSingularRatioError(LongpredError):
    """Denominator prediction too close to zero for a ratio variance."""

    exit_code = 3
