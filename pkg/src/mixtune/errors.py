"""Exception types shared across the package.

Plain ``ValueError`` covers bad arguments and violated preconditions; the
classes here mark conditions callers are expected to branch on (CLI exit
codes, recovery decisions).
"""


class CorruptionError(RuntimeError):
    """On-disk artifact is inconsistent with its manifest/header."""


class NumericalError(RuntimeError):
    """A loss or update produced a non-finite value."""


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""
