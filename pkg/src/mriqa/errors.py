"""Exception hierarchy; ``exit_code`` is what the CLI returns for each class."""


class MriqaError(Exception):
    exit_code = 1


class InvalidInputError(MriqaError, ValueError):
    exit_code = 2


class ShapeError(MriqaError, ValueError):
    exit_code = 3


class FormatError(MriqaError, ValueError):
    exit_code = 4


class DegenerateClassError(MriqaError, ValueError):
    """A class with zero samples where at least one is required."""

    exit_code = 5


class ProtocolError(MriqaError, RuntimeError):
    """Self-training cannot proceed, e.g. every item was pruned."""

    exit_code = 6


class ConfigError(MriqaError, ValueError):
    exit_code = 7
