"""Exception hierarchy shared by all pipeline stages.

Each family maps to a CLI exit code: usage problems exit 1, bad input data
exits 2, numeric failures exit 3.
"""


class P2PError(Exception):
    exit_code = 1


class UsageError(P2PError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(P2PError):
    exit_code = 2


class NumericError(P2PError):
    exit_code = 3


# packet ingest
class NotRtp(DataError):
    """Payload is not an RTP packet; callers skip it."""


class TooShort(NotRtp):
    pass


class BadVersion(NotRtp):
    pass


class UnreadableFile(DataError):
    pass


class NoRtpFound(DataError):
    pass


class MalformedLine(DataError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class NonMonotonicTime(MalformedLine):
    pass


# windowing
class WrongCount(DataError):
    pass


class UnknownClockRate(DataError):
    pass


class NoActiveFlows(DataError):
    pass


# numerical substrate
class ShapeMismatch(NumericError):
    pass


class EmptyRow(NumericError):
    pass


class BadDegree(ConfigError):
    pass


class DivergedLoss(NumericError):
    pass


# training / evaluation
class TooFewSessions(DataError):
    pass


class EmptySplit(DataError):
    pass


class AllMasked(DataError):
    pass


class InvalidScenario(ConfigError):
    pass
