"""Exception hierarchy shared across the package."""


class PhaseTopoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PhaseTopoError):
    """Invalid configuration, boundary specification or parameter set.

    ``key`` names the offending configuration key (or boundary entity) and
    ``line`` the 1-based line in the source text, when known.
    """

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key is not None:
            prefix.append(f"key {key!r}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)


class MeshFormatError(PhaseTopoError):
    """Malformed mesh text (bad token, wrong count, dangling index)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshTopologyError(PhaseTopoError):
    """Mesh violates an invariant; ``entity`` identifies the offender."""

    def __init__(self, message, entity=None):
        self.entity = entity
        super().__init__(message)


class SolverError(PhaseTopoError):
    """Linear solver failed to reach its tolerance."""

    def __init__(self, message, residual_history=None):
        self.residual_history = list(residual_history or [])
        super().__init__(message)


class SingularMatrixError(SolverError):
    """Direct factorization hit an exactly singular pivot."""

    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class NewtonConvergenceError(PhaseTopoError):
    """Newton iteration did not converge; carries the iteration report."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
