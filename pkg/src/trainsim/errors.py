"""Exception types shared across the package."""


class TrainsimError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(TrainsimError):
    """A file does not conform to its documented format."""


class UnresolvedReferenceError(FormatError):
    """A raw IR node references a name that no earlier node defines."""


class MissingShapeError(FormatError):
    """A raw IR node that must carry tensor metadata has none."""


class UnknownOperatorError(TrainsimError):
    """An operator is neither in the mapping table nor elidable."""


class CyclicGraphError(TrainsimError):
    """A dependency cycle where a DAG is required."""


class InvalidGraphError(TrainsimError):
    """A workload graph failed validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:8])
        more = "" if len(self.violations) <= 8 else f" (+{len(self.violations) - 8} more)"
        super().__init__(f"{len(self.violations)} violation(s): {lines}{more}")


class UnsupportedComboError(TrainsimError):
    """A model/parallelism combination the synthesizer cannot realize."""


class UnsupportedAlgoTopologyError(TrainsimError):
    """A collective algorithm that is not defined on the given topology."""


class InconsistentGroupsError(TrainsimError):
    """Collective instances disagree across ranks (kind, group, or bytes)."""


class DeadlockError(TrainsimError):
    """Simulation or plan execution stalled with work remaining."""


class RankMismatchError(TrainsimError):
    """Two graph sets do not cover the same ranks."""
