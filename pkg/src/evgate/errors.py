"""Exception hierarchy shared across the package."""


class EvGateError(Exception):
    """Base class for all package errors."""


class ConfigError(EvGateError):
    """Invalid configuration or input file."""


class NonCanonicalInput(EvGateError):
    pass


# manifests / proofs
class ManifestError(EvGateError):
    pass


class LeafCapExceeded(ManifestError):
    pass


class DuplicateDocId(ManifestError):
    pass


class MalformedEntry(ManifestError):
    pass


class MalformedProof(ManifestError):
    pass


class EmptyKeySet(ManifestError):
    pass


class SignerRevoked(EvGateError):
    pass


class SubstrateWriteFailure(EvGateError):
    pass


# gates
class MissingDates(EvGateError):
    """Drifting-topic check needs publication dates on every fragment."""


# stats
class InvalidRates(EvGateError):
    pass


class InvalidEnrollment(EvGateError):
    pass


class OutOfRange(EvGateError):
    pass


# evidence
class NonPassingInput(EvGateError):
    pass


class MonocultureViolation(EvGateError):
    """No minimal set satisfying the one-fragment-per-issuer cap was found."""


class EmptySlacks(EvGateError):
    pass


# engine
class StageTimeout(EvGateError):
    def __init__(self, stage: str, elapsed_ms: int | None = None):
        super().__init__(f"stage {stage!r} timed out")
        self.stage = stage
        self.elapsed_ms = elapsed_ms


class NoActiveIncident(EvGateError):
    pass


class OverlappingIncident(EvGateError):
    pass


class UnmappedReason(EvGateError):
    pass


# receipts
class MissingMandatoryField(EvGateError):
    pass


# revocation
class UnknownKid(EvGateError):
    pass


class SequenceGap(EvGateError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"substrate sequence gap: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


# simulator
class InvalidConfig(EvGateError):
    pass
