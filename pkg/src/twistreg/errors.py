"""Exception types shared across the package."""


class ParseError(ValueError):
    """A point-cloud file could not be parsed; message carries the line number."""


class DegenerateBlendError(RuntimeError):
    """Dual-quaternion blend collapsed (weighted real parts cancel)."""


class DegenerateCorrespondenceError(RuntimeError):
    """All correspondence mass vanished; there is nothing left to fit."""


class BindingError(ValueError):
    """Too many model points have no deformation node within reach."""


class SolverError(RuntimeError):
    """Normal equations stayed unsolvable after damping escalation."""
