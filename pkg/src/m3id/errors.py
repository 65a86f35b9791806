"""Error types shared across the package.

Two failure families matter to callers: a caller broke an operation's
contract (bad shape, bad mode, bad config value), or an external input
could not be parsed. The CLI maps them to exit codes 1 and 2.
"""


class ContractViolation(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class ParseError(ValueError):
    """An external file (volume, CSV, config, checkpoint) is malformed."""
