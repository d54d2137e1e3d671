"""Exception hierarchy shared by every gaslite module."""


class GasLiteError(Exception):
    """Base class for protocol and simulator errors."""


class EncodingError(GasLiteError, ValueError):
    pass


class ArithmeticOverflow(GasLiteError, OverflowError):
    """A u64 counter left its range. Never wrapped, always raised."""


# routing
class EmptyRegistry(GasLiteError):
    pass


class UnknownBundler(GasLiteError, KeyError):
    pass


class DuplicateBundler(GasLiteError):
    pass


# state
class UnknownUser(GasLiteError, KeyError):
    pass


class NotValidated(GasLiteError):
    """A transition was requested for an op its validator rejects."""


class RuleMismatch(GasLiteError):
    pass


# chain
class NotSlashable(GasLiteError):
    pass


class SlashedBundler(GasLiteError):
    pass


# persistence
class ChainBreak(GasLiteError):
    pass


class CorruptBlob(ChainBreak):
    """Blob bytes no longer hash to their content id."""

    def __init__(self, cid: bytes, message: str = ""):
        self.cid = cid
        super().__init__(message or f"blob {cid.hex()} does not match its content id")


class MissingBlob(GasLiteError, KeyError):
    def __init__(self, cid: bytes):
        self.cid = cid
        super().__init__(f"missing blob {cid.hex()}")


class RootMismatch(GasLiteError):
    pass


# gas model
class Underdetermined(GasLiteError):
    pass


class InconsistentAnchors(GasLiteError):
    pass


# simulator
class ConfigError(GasLiteError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class SchemaError(GasLiteError):
    pass
