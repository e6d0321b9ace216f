"""Exception and warning types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
MissingPrerequisiteError -> 3, DivergenceError -> 4.
"""


class ShapeError(ValueError):
    """Input dimensions do not match the expected matrix/atlas shape."""


class ParseError(ValueError):
    """A file cell could not be parsed; message carries row/col position."""


class ParameterError(ValueError):
    """An argument violates an operation's precondition."""


class EmptyClassError(ValueError):
    """A selection (label, split) matched no subjects."""


class AtlasMismatchError(ValueError):
    """Two objects built against different atlas partitions were combined."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class MissingPrerequisiteError(FileNotFoundError):
    """A command needs an artifact another command has not produced yet."""


class DivergenceError(ArithmeticError):
    """A training loss became non-finite or exceeded the divergence guard."""


class FCRepairWarning(UserWarning):
    """A loaded FC matrix needed repair (symmetrization, diagonal, clamping)."""
