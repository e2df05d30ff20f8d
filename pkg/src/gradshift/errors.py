"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class DataFormatError(ValueError):
    """A file (IDX, pixmap, weights) violates its documented format."""


class ConfigError(ValueError):
    """Invalid configuration file, CLI usage, or run parameters."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message is prefixed with the stage name."""
