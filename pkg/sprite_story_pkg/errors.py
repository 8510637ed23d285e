"""Exception types raised across the sprite story package.

Library code raises these; the command-line surface maps them to exit codes.
"""


class SpriteStoryError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(SpriteStoryError, ValueError):
    """Invalid parameters, shapes, layouts or vocabulary ids."""

    exit_code = 2


class NumericFailure(SpriteStoryError, ArithmeticError):
    """Non-finite values in a forward pass or a loss component."""

    exit_code = 3


class CheckpointError(SpriteStoryError, OSError):
    """Corrupt or incomplete checkpoint and dataset directories."""

    exit_code = 1
