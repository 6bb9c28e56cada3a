"""Exception hierarchy shared by all gacvid modules."""


class GacError(Exception):
    """Base class for every error raised by gacvid."""


class MissingPoint(GacError):
    def __init__(self, index: int):
        super().__init__(f"pose point P{index} is not visible")
        self.index = index


class DegeneratePart(GacError):
    pass


class EmptyLibrary(GacError):
    pass


class ShapeMismatch(GacError):
    pass


class InvalidSpec(GacError):
    pass


class OddLength(GacError):
    pass


class FormatError(GacError):
    pass


class ConfigError(GacError):
    pass


class NonFinite(GacError):
    pass


class NonFiniteLoss(NonFinite):
    pass


class InsufficientPersons(GacError):
    pass


class WindowTooShort(GacError):
    pass


class MissingArtifact(GacError):
    """A required upstream artifact (dataset, conditions, checkpoint) is absent."""


class MissingCheckpoint(MissingArtifact):
    pass


class AlignmentError(GacError):
    pass


class TooFewFrames(GacError):
    pass
