"""Exception hierarchy shared across the pipeline."""


class CclhError(Exception):
    """Base class for every error raised by this package."""


class DataError(CclhError):
    """Input data could not be loaded or does not satisfy its schema."""


class MalformedFile(DataError):
    pass


class UnknownInstance(DataError):
    def __init__(self, ids, count=None):
        self.ids = sorted(set(ids))
        self.count = len(ids) if count is None else count
        shown = ", ".join(repr(i) for i in self.ids[:10])
        super().__init__(f"{self.count} record(s) reference unknown instance(s): {shown}")


class EmptyTopology(DataError):
    pass


class WindowTooShort(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class StatsMismatch(DataError):
    pass


class ShapeMismatch(CclhError, ValueError):
    pass


class EmptyEdge(CclhError, ValueError):
    pass


class IsolatedVertex(CclhError, ValueError):
    pass


class LabelMissing(DataError):
    pass


class LabelMismatch(DataError):
    pass


class EmptyRankings(CclhError, ValueError):
    pass


class EmptyCase(DataError):
    pass


class TooFewComponents(DataError):
    pass


class InvalidConfig(CclhError, ValueError):
    pass


class InvalidCulprit(CclhError, ValueError):
    pass


class IncompatibleArtifact(DataError):
    pass


class TriggerNeverFired(CclhError, RuntimeWarning):
    """Warning category: the task trigger was never reached during training."""
