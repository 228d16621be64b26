"""Exception hierarchy shared by every module in the package."""


class InvError(Exception):
    """Base class for all package errors."""


class InvalidArgument(InvError, ValueError):
    pass


class CorruptData(InvError, ValueError):
    pass


class UnsupportedStream(InvError):
    pass


class ProtocolError(InvError):
    pass


class CorruptPacket(InvError):
    """CRC or framing failure; ``frame_index`` is the last good frame + 1 when known."""

    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


class TruncatedSession(InvError):
    def __init__(self, message: str, frames_delivered: int = 0):
        super().__init__(message)
        self.frames_delivered = frames_delivered


class SessionError(InvError):
    def __init__(self, message: str, frames_delivered: int = 0):
        super().__init__(message)
        self.frames_delivered = frames_delivered
