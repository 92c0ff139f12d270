"""Exception types shared across the package.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its one-line failure message.
"""

from __future__ import annotations


class Mono4DError(Exception):
    category = "error"


class InputShapeError(Mono4DError, ValueError):
    category = "shape"


class DegenerateInputError(Mono4DError, ValueError):
    """Too few usable correspondences for a well-posed solve."""

    category = "degenerate"


class DegeneracyError(Mono4DError, ValueError):
    """Rank-deficient configuration (collinear points, zero variance).

    ``axis`` holds the unit direction along which the configuration has no
    spread, when it can be identified.
    """

    category = "degenerate"

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class InsufficientSupportError(Mono4DError, ValueError):
    category = "support"


class NonFiniteLossError(Mono4DError, FloatingPointError):
    category = "numeric"

    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term
        self.value = value


class PoseSolveError(Mono4DError, ValueError):
    """A pairwise pose solve failed; ``frame`` is the later frame of the pair."""

    category = "degenerate"

    def __init__(self, frame, cause):
        super().__init__(f"pose solve failed for frames {frame - 1}->{frame}: {cause}")
        self.frame = frame
        self.cause = cause


class StitchError(Mono4DError, ValueError):
    category = "stitch"

    def __init__(self, window, cause):
        super().__init__(f"stitching window {window} failed: {cause}")
        self.window = window
        self.cause = cause


class StreamError(Mono4DError, RuntimeError):
    """Streaming reconstruction aborted.

    ``partial`` holds the sequence assembled up to the last good window.
    """

    category = "stream"

    def __init__(self, window, cause, partial=None):
        super().__init__(f"window {window} failed: {cause}")
        self.window = window
        self.cause = cause
        self.partial = partial


class RefinementAborted(Mono4DError, RuntimeError):
    category = "numeric"

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class FormatError(Mono4DError, ValueError):
    """Base class for file parse errors; names the file and byte offset."""

    category = "format"

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class SchemaError(Mono4DError, ValueError):
    """JSON document violates its schema; ``pointer`` is a JSON pointer."""

    category = "schema"

    def __init__(self, source, pointer, message):
        super().__init__(f"{source}: {pointer or '/'}: {message}")
        self.source = str(source)
        self.pointer = pointer


class ManifestError(Mono4DError, ValueError):
    """Manifest validation failed; ``problems`` lists every issue found."""

    category = "manifest"

    def __init__(self, problems):
        self.problems = list(problems)
        lines = "; ".join(self.problems)
        super().__init__(f"{len(self.problems)} manifest problem(s): {lines}")
