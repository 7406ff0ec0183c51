"""Exception hierarchy shared across the package.

Two branches matter to callers: problems with inputs or configuration
(``InputError``) and numerical or estimation failures on valid inputs
(``EstimationError``). The CLI maps them to exit codes 1 and 2.
"""

from __future__ import annotations


class ClusterDrError(Exception):
    """Base class for all package errors."""


class InputError(ClusterDrError):
    """Invalid data, schema, or configuration supplied by the caller."""


class EstimationError(ClusterDrError):
    """A numerical procedure failed on otherwise valid inputs."""


class DegenerateDesignError(EstimationError):
    """Design lacks the variation an estimator needs (e.g. no residual
    treatment variation after demeaning, or a training fold with one arm)."""


class EmptyOverlapError(EstimationError):
    """Trimming removed every unit; the estimand is undefined."""


class UnbalancedPanelError(EstimationError):
    """Panel operations require every unit observed in every period."""
