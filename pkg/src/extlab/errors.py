"""Exception types shared across the lab."""


class LabError(Exception):
    """Base class for all lab failures."""


class CertificationError(LabError):
    """A numerical self-check (quadrature, gridded accuracy, stride
    refinement) did not meet its tolerance."""


class BudgetError(LabError):
    """An allocation would exceed the configured memory budget."""

    def __init__(self, message, required_bytes=None, budget_bytes=None):
        super().__init__(message)
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes


class ConfigError(LabError):
    """Invalid experiment configuration; carries the offending path."""

    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path
