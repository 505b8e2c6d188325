"""Exception hierarchy shared by every stage of the pipeline."""


class FaceGanError(Exception):
    """Base class; the CLI maps these to exit code 2."""


class ConfigError(FaceGanError, ValueError):
    pass


class EmptyDataset(FaceGanError):
    pass


class DecodeError(FaceGanError):
    pass


class CropError(FaceGanError):
    pass


class ShapeError(FaceGanError, ValueError):
    pass


class NumericalError(FaceGanError, ArithmeticError):
    pass


class EmptyTriplets(FaceGanError):
    """No valid (anchor, positive, negative) triple exists in a batch."""
