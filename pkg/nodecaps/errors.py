"""Exception types raised across nodecaps.

Everything derives from :class:`NodeCapsError` so the CLI can turn any
library failure into an exit code and a machine-readable error record.
"""

from typing import Any


class NodeCapsError(RuntimeError):
    """Base class for every error nodecaps raises on purpose."""

    kind = "error"

    def __init__(self, message: str, **fields: Any):
        super().__init__(message)
        self.fields = fields

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.kind, "message": str(self), **self.fields}


class StructureError(NodeCapsError):
    """A matrix or graph violates a structural requirement."""

    kind = "structure"


class ValidationError(NodeCapsError, ValueError):
    """A value is outside its allowed range."""

    kind = "validation"


class ShapeError(NodeCapsError, ValueError):
    """Operand dimensions do not line up."""

    kind = "shape"


class StaleTapeError(NodeCapsError):
    """A tape is replayed after the parameters it recorded have changed."""

    kind = "stale-tape"


class DivergenceError(NodeCapsError):
    """Training produced a non-finite loss or gradient."""

    kind = "divergence"


class DatasetError(NodeCapsError):
    """Dataset files are missing or inconsistent with their manifest."""

    kind = "dataset"


class DanglingEdgeError(DatasetError):
    kind = "dangling-edge"


class LabelRangeError(DatasetError):
    kind = "label-range"


class CountMismatchError(DatasetError):
    kind = "count-mismatch"


class FormatError(DatasetError):
    """A text file has a malformed line."""

    kind = "format"


class InfeasibleSplitError(DatasetError):
    kind = "infeasible-split"
