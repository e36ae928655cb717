"""Exception hierarchy shared across the package.

Contract violations (bad shapes, invalid configs, malformed inputs) raise
ContractError; failures touching the filesystem raise ArtifactIOError. The
CLI maps these to exit codes 2 and 3 respectively.
"""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class DataFormatError(ContractError):
    """A file or payload does not match its documented format."""


class ArtifactIOError(OSError):
    """Reading or writing an on-disk artifact failed."""
