"""Exception hierarchy shared by all csa modules."""


class CsaError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(CsaError, ValueError):
    """Invalid parameters or malformed inputs."""


class BruteForceGuardError(ParameterError):
    """Exhaustive search requested on an instance that is too large."""


class SolverResourceError(CsaError):
    """The DP table would exceed the configured cell budget."""


class TokenError(CsaError):
    """A sealed token or ciphertext could not be opened."""


class TamperError(TokenError):
    """Authentication tag check failed (wrong key or modified bytes)."""


class FormatError(TokenError):
    """Unknown version byte or truncated/garbled token layout."""


class WireFormatError(CsaError):
    """A protocol message could not be decoded."""


class ConflictError(CsaError):
    """Duplicate registration."""


class CostContractError(CsaError):
    """A cost event does not match the operation vocabulary."""


class EmptyLedgerError(CsaError):
    """Comparison requested on a ledger with no events."""


class ProtocolFailure(CsaError):
    """The server rejected a client step; ``reason`` carries its verdict."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class CalibrationError(CsaError):
    """Benchmark parameters exceed the solver's resource guard."""
