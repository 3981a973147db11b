class StagewiseError(ValueError):
    """Base class for every input/model problem the package reports."""


class LabelDataError(StagewiseError):
    """Label files or matrices that cannot be used (empty, unknown labels, silent workers)."""


class ShapeMismatchError(StagewiseError):
    """Model and data disagree on workers, categories or components."""


class SizeGuardError(StagewiseError):
    """Exact enumeration refused because the joint table would be too large."""


class SplitAbortedError(StagewiseError):
    """Raised inside the split engine when the restricted objective is not finite."""
