"""Exception types raised across the package.

Every exception derives from :class:`VislamError` so callers (the CLI in
particular) can map failures to exit codes with a single ``except``.
"""


class VislamError(Exception):
    exit_code = 2


class AngleNearPi(VislamError):
    """SE(3)/SO(3) logarithm requested for a rotation angle too close to pi."""


class ConfigInvalid(VislamError):
    exit_code = 1


class NoRevisits(VislamError):
    pass


class BehindCamera(VislamError):
    pass


class EmptySegment(VislamError):
    pass


class TrackingLost(VislamError):
    exit_code = 3


class SingularBlock(VislamError):
    pass


class InsufficientSample(VislamError):
    pass


class DuplicateId(VislamError):
    pass


class Degenerate(VislamError):
    pass


class NotEnoughCorrespondences(VislamError):
    pass


class VerificationFailed(VislamError):
    """RANSAC could not verify the candidate; the loop closure is rejected."""


class NotConnected(VislamError):
    pass


class UnknownKeyframe(VislamError):
    pass


class AlreadyMerged(VislamError):
    pass


class NoAssociation(VislamError):
    exit_code = 4


class MissingTimestamp(VislamError):
    exit_code = 4


class FormatError(VislamError):
    """A file on disk does not follow the expected layout."""
