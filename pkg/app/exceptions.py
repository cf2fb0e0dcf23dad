class LabError(Exception):
    """Base error. Carries the process exit code the CLI should return."""

    exit_code = 1

    def __init__(self, detail: str, exit_code: int | None = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(LabError):
    exit_code = 2


class ResourceLimitError(LabError):
    exit_code = 2


# ---------------- domain errors ----------------

class IndivisibleIntervalError(LabError, ValueError):
    pass


class SingularConfigurationError(LabError, ValueError):
    pass


class WeightError(LabError, ValueError):
    pass


class KernelEvaluationError(LabError, ValueError):
    pass


class DegenerateMeasureError(LabError, ValueError):
    pass


class ConvergenceError(LabError, RuntimeError):
    pass
