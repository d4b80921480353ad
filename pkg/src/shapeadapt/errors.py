"""Exception hierarchy shared by every module."""


class ValidationError(ValueError):
    """Input violates a documented invariant or precondition."""


class NovelClassError(ValidationError):
    """A training set contains samples of a novel-split class."""


class ContainerError(ValidationError):
    """A serialized container could not be decoded."""


class VersionMismatchError(ContainerError):
    pass


class TruncatedBlobError(ContainerError):
    pass


class InconsistentHeaderError(ContainerError):
    pass


class CheckFailedError(RuntimeError):
    """A verification command (e.g. gradient check) did not pass."""
