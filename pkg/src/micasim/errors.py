"""Exception hierarchy for the simulator.

Every error raised by the platform derives from MicaError, grouped per
subsystem so callers can catch at the granularity they care about.
Access denials are NOT exceptions: granule reads and writes return the
FAULT sentinel instead (see granules.py).
"""


class MicaError(Exception):
    """Base class for all simulator errors."""


# --- granule space ---------------------------------------------------------

class GranuleError(MicaError):
    pass


class OutOfRange(GranuleError):
    pass


class AlreadyDelegated(GranuleError):
    pass


class NotDelegated(GranuleError):
    pass


class InUse(GranuleError):
    pass


# --- realm lifecycle -------------------------------------------------------

class RealmError(MicaError):
    pass


class UnknownRealm(RealmError):
    pass


class GranuleNotDelegated(RealmError):
    pass


class ImageTooLarge(RealmError):
    pass


class RealmTerminated(RealmError):
    pass


class LockedDown(RealmError):
    pass


# --- policy text / codec ---------------------------------------------------

class PolicyError(MicaError):
    pass


class PolicySyntaxError(PolicyError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(PolicyError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class DuplicatePeer(PolicyError):
    pass


class DuplicateMapping(PolicyError):
    pass


class EmptyRange(PolicyError):
    pass


class PolicyTooLarge(PolicyError):
    pass


class BadMagic(PolicyError):
    pass


class BadVersion(PolicyError):
    pass


class TruncatedBlob(PolicyError):
    pass


# --- monitor call surface --------------------------------------------------

class MonitorCallError(MicaError):
    pass


class PdAlreadySet(MonitorCallError):
    pass


class NoPd(MonitorCallError):
    pass


class SgtFull(MonitorCallError):
    pass


class IpaOccupied(MonitorCallError):
    pass


class AliasedInRealm(MonitorCallError):
    pass


class BadBlob(MonitorCallError):
    pass


class SecondUpload(MonitorCallError):
    pass


class PolicyRefused(MonitorCallError):
    """Policy validation failed; the uploading realm has been terminated."""

    def __init__(self, report):
        codes = ",".join(f.code.name for f in report.failures)
        super().__init__(f"policy validation failed: {codes}")
        self.report = report


class AnyExhausted(MonitorCallError):
    pass


class RightsExceedAny(MonitorCallError):
    pass


class NoStagedToken(MonitorCallError):
    pass


# --- token verification ----------------------------------------------------

class TokenError(MicaError):
    pass


class BadSignature(TokenError):
    pass


class NonceMismatch(TokenError):
    pass


class DigestMismatch(TokenError):
    pass


class InconsistentActivity(TokenError):
    pass


# --- scenario harness ------------------------------------------------------

class ScenarioError(MicaError):
    pass


class ScenarioParseError(ScenarioError):
    pass


class ExpectationFailed(ScenarioError):
    pass
