"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: OSError -> 2, SchemaError /
ValidationError / ConfigError -> 3, NumericalError -> 4.
"""


class DocmatchError(Exception):
    """Base class for all domain errors raised by this package."""


class SchemaError(DocmatchError):
    """Input file header or column mapping does not match the schema."""


class ValidationError(DocmatchError):
    """A record, parameter, or intermediate result violates a contract."""


class ConfigError(DocmatchError):
    """A configuration file or config value is invalid."""


class NumericalError(DocmatchError):
    """Training produced a non-finite parameter or loss.

    Carries the epoch and step at which the problem was detected so grid
    searches can report which point diverged.
    """

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
