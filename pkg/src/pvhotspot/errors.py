"""Exception hierarchy.

``DataError`` covers anything wrong with user-supplied files or values;
the CLI maps it to exit code 2.
"""


class PVHotspotError(Exception):
    pass


class DataError(PVHotspotError):
    pass


class MalformedTiff(DataError):
    pass


class UnsupportedTiff(DataError):
    pass


class InvalidPercentiles(DataError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DimensionMismatch(DataError):
    pass


class InsufficientDistinctBoxes(DataError):
    pass


class CfgError(DataError):
    def __init__(self, message, section=None, line=None):
        self.section = section
        self.line = line
        where = []
        if section is not None:
            where.append(f"section [{section}]")
        if line is not None:
            where.append(f"line {line}")
        prefix = (", ".join(where) + ": ") if where else ""
        super().__init__(prefix + message)


class BadHeader(DataError):
    pass


class WeightSizeMismatch(DataError):
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        diff = expected - actual
        detail = f"{diff} floats short" if diff > 0 else f"{-diff} floats extra"
        super().__init__(
            f"weight file holds {actual} floats, network needs {expected} ({detail})"
        )


class NonFiniteWeight(DataError):
    def __init__(self, layer, offset):
        self.layer = layer
        self.offset = offset
        super().__init__(f"non-finite weight in layer {layer} at float offset {offset}")


class DuplicateImageId(DataError):
    pass


class ShapeMismatch(PVHotspotError, ValueError):
    pass


class NotLoaded(PVHotspotError):
    pass


class SlotCollision(PVHotspotError, ValueError):
    pass
