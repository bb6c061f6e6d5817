"""Exception hierarchy shared by the solver, the particle layer and the front-ends."""

from __future__ import annotations


class PLaplaceLabError(Exception):
    """Base class for every error raised by the laboratory."""


class ConfigInvalid(PLaplaceLabError):
    """Raised when an experiment file or a Problem violates its schema.

    Args:
        field_path (str): Dotted path of the offending field, e.g. ``particles.N``.
        message (str): Human readable reason.
    """

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}")


class NonConvergence(PLaplaceLabError):
    """Raised when a proximal step does not reach its residual tolerance."""

    def __init__(self, iterations: int, residual: float, step: int | None = None):
        self.iterations = iterations
        self.residual = residual
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"prox step did not converge{where}: {iterations} iterations, "
            f"relative residual {residual:.3e}"
        )


class ZeroMass(PLaplaceLabError):
    """Raised when a density with no positive mass is sampled."""


class EscapedDomain(PLaplaceLabError):
    """Raised when particles leave the computational box."""

    def __init__(self, step: int, count: int, max_abs: float, half_width: float):
        self.step = step
        self.count = count
        self.max_abs = max_abs
        super().__init__(
            f"{count} particle(s) left the box [-{half_width}, {half_width}] at step {step} "
            f"(max |X| = {max_abs:.4g}); enlarge L"
        )


class DegenerateSample(PLaplaceLabError):
    """Raised when an automatic bandwidth cannot be computed from a sample."""


class NotOneDimensional(PLaplaceLabError):
    """Raised when a one-dimensional metric is requested on d > 1 data."""


class MissingRun(PLaplaceLabError):
    """Raised when a run directory or one of its artifacts does not exist."""

    def __init__(self, path):
        self.path = path
        super().__init__(f"run artifact not found: {path}")


class MissingCalibration(PLaplaceLabError):
    """Raised when no calibrated support constant is available for (p, d)."""

    def __init__(self, p: float, d: int):
        self.p = p
        self.d = d
        super().__init__(f"no calibrated support constant for p={p}, d={d}")
