class GroupCamError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidArgumentError(GroupCamError, ValueError):
    """An argument violates an operation's precondition"""


class TrainingFailureError(GroupCamError, RuntimeError):
    """Training diverged or missed its accuracy gate"""


class InvariantViolationError(GroupCamError, AssertionError):
    """An internal post-condition check failed"""
