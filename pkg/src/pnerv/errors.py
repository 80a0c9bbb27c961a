class PNeRVError(Exception):
    """Base class for errors raised by pnerv pipelines."""


class ConfigError(PNeRVError, ValueError):
    pass


class FormatError(PNeRVError, ValueError):
    """Malformed checkpoint, bitstream or video file."""
