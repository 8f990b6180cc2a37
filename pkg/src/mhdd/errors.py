"""Exception hierarchy shared by every module."""


class MhddError(Exception):
    """Base class; the CLI maps it to exit code 1."""


class InvalidArgument(MhddError, ValueError):
    pass


class OutOfRange(MhddError, IndexError):
    pass


class ParseError(MhddError, ValueError):
    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


class UnsupportedFormat(ParseError):
    pass


class FormatError(MhddError, ValueError):
    """Bad version, checksum mismatch or truncated persistence file."""


class ProgramFailure(MhddError):
    def __init__(self, msg, reading=None, address=None):
        if address is not None:
            msg = f"{msg} at {address}"
        super().__init__(msg)
        self.reading = reading
        self.address = address


class DecodeFailure(MhddError):
    def __init__(self, msg, address=None):
        if address is not None:
            msg = f"{msg} at {address}"
        super().__init__(msg)
        self.address = address


class PreconditionViolation(MhddError):
    pass


class ResetFailure(MhddError):
    pass


class PoolExhausted(MhddError):
    pass


class GateFailure(MhddError):
    """A device-executed gate disagreed with its arithmetic result."""

    def __init__(self, msg, address=None):
        if address is not None:
            msg = f"{msg} at {address}"
        super().__init__(msg)
        self.address = address
