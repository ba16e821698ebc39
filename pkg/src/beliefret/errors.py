"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config errors, input errors (including
degenerate inputs and file parse failures), and numeric errors each get their
own category.
"""


class BeliefretError(Exception):
    """Base class for all package errors."""


class DimensionError(BeliefretError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(BeliefretError):
    """A configuration value is missing, unknown, or out of range."""


class InputError(BeliefretError):
    """Runtime input (labels, token ids, batch contents) violates a contract."""


class DegenerateInputError(InputError):
    """Input is structurally valid but numerically degenerate (e.g. zero-norm rows)."""


class ParseError(InputError):
    """A file could not be parsed; message carries the offending line number."""


class ContractError(BeliefretError):
    """An API was called outside its documented contract."""


class NumericError(BeliefretError):
    """A computation produced non-finite values or diverged."""
