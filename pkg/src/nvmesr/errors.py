"""Exception hierarchy shared by every module."""


class ESRError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ESRError, ValueError):
    pass


class SizeError(ESRError, ValueError):
    pass


class NotSPDError(ESRError, ValueError):
    pass


class BreakdownError(ESRError, ArithmeticError):
    pass


class InvalidConfigError(ESRError, ValueError):
    pass


class PlacementError(ESRError):
    pass


class CapacityError(ESRError):
    """Volatile or non-volatile memory budget exceeded."""


# recovery records

class StaleRecordError(ESRError):
    pass


class CorruptRecordError(ESRError):
    pass


class ColdStartError(ESRError):
    """No complete recovery record exists yet."""


class UnrecoverableError(ESRError):
    pass


class PersistenceUnavailableError(ESRError):
    pass


class UnavailableError(ESRError):
    """Durable data exists but its node is not reachable right now."""


# one-sided communication

class EpochError(ESRError):
    pass


class RangeError(ESRError, IndexError):
    pass


class CollectiveMismatchError(ESRError):
    pass


class UnsupportedError(ESRError, NotImplementedError):
    pass


# control flow inside the simulator

class SimulatedCrash(ESRError):
    """A durable write was cut short by an injected crash."""

    def __init__(self, written: int, total: int):
        super().__init__(f"crash after {written} of {total} bytes")
        self.written = written
        self.total = total


class RankFailure(ESRError):
    """Raised into the solver loop when compute ranks have died."""

    def __init__(self, ranks, iteration: int, phase: str = "compute"):
        self.ranks = frozenset(ranks)
        self.iteration = iteration
        self.phase = phase
        super().__init__(f"ranks {sorted(self.ranks)} failed at iteration {iteration} ({phase})")


class RedundancyWarning(UserWarning):
    """Fewer live redundancy holders than configured."""
