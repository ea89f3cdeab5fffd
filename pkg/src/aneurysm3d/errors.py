"""Exception hierarchy shared by every stage of the pipeline."""


class Aneurysm3DError(Exception):
    """Base class; the CLI reports subclasses by class name."""


class ConstantVolume(Aneurysm3DError):
    pass


class GeometryMismatch(Aneurysm3DError):
    pass


class EmptySeeds(Aneurysm3DError):
    pass


class DegenerateSlice(Aneurysm3DError):
    pass


class ShapeMismatch(Aneurysm3DError):
    pass


class ConfigInvalid(Aneurysm3DError):
    pass


class EmptyAnnotation(Aneurysm3DError):
    pass


class DivergenceDetected(Aneurysm3DError):
    pass


class TooFewCases(Aneurysm3DError):
    pass


class NoPositives(Aneurysm3DError):
    pass


class SpecInvalid(Aneurysm3DError):
    pass


class FormatError(Aneurysm3DError):
    """Malformed file. ``field`` names the first offending entry, ``offset``
    is a byte or character position when one is known."""

    def __init__(self, message, field=None, offset=None):
        self.field = field
        self.offset = offset
        where = []
        if field is not None:
            where.append(f"field={field}")
        if offset is not None:
            where.append(f"offset={offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
