"""
Exception hierarchy shared by every discnn_detector module.
  DisCNNError is the root; the CLI turns any DisCNNError into a one-line diagnostic.
"""


class DisCNNError(Exception):
    pass


class ShapeError(DisCNNError, ValueError):
    """ Raised when a tensor extent disagrees with what an operation needs.
        dimension names the offending axis, e.g. 'input channels' or 'H'.
    """
    def __init__(self, dimension: str, expected, actual):
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(f'shape mismatch in {dimension}: expected {expected}, got {actual}')


class NumericError(DisCNNError, ArithmeticError):
    pass


class CheckpointError(DisCNNError):
    pass


class ImageFormatError(DisCNNError):
    pass


class DatasetError(DisCNNError):
    pass


class ConfigError(DisCNNError, ValueError):
    pass


class RegistryError(DisCNNError):
    pass
