"""Exception types shared across the package.

Every error raised by the public API derives from :class:`EblError` so
callers can catch one base class. The CLI maps config/usage errors to
exit code 2 and runtime/data errors to exit code 3.
"""


class EblError(Exception):
    """Base class for all package errors."""


class ConfigError(EblError):
    """Invalid configuration value or file (CLI exit code 2)."""


class ZeroNormError(EblError):
    """Vector norm too small to normalize or compare directions."""


class LengthMismatchError(EblError):
    """Operands have incompatible lengths."""


class NonFiniteError(EblError):
    """A NaN or infinity appeared where a finite value is required.

    Raised both by the finite-difference oracle (non-finite evaluation)
    and by forward passes (non-finite activation).
    """


class SeparationUnsatisfiableError(EblError):
    """Identity rejection sampling exhausted its attempt budget."""


class UnknownIdentityError(EblError):
    """Identity index not present in the world."""


class TooFewIdentitiesError(EblError):
    """Operation needs more identities than the pool provides."""


class BadArchitectureError(EblError):
    """Projection-head or LSTM architecture violates its contract."""


class StaleCacheError(EblError):
    """Backward pass invoked without a matching train-mode forward cache."""


class NoNegativesError(EblError):
    """Episode carries no negative references."""


class DivergedError(EblError):
    """Training produced a non-finite loss."""


class InsufficientFramesError(EblError):
    """Session too short for one full window after pose exclusion."""


class OneClassOnlyError(EblError):
    """AUC requested on scores containing a single label class."""


class NotUnitNormError(EblError):
    """Input expected on the unit hypersphere is not unit norm."""


class InfeasibleSamplingError(EblError):
    """Margin-verifier hypotheses could not be sampled."""


class CodecError(EblError):
    """Base class for wire/checkpoint format errors."""


class BadMagicError(CodecError):
    """Stream or checkpoint does not start with the expected magic."""


class BadCrcError(CodecError):
    """CRC32 trailer does not match the payload."""


class TruncatedError(CodecError):
    """Byte buffer ends before the declared length."""
