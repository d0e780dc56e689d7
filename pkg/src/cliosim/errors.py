"""Response status codes and the exceptions that carry them."""

from __future__ import annotations

from enum import IntEnum


class Status(IntEnum):
    OK = 0
    NACK = 1
    PERM = 2
    BAD_OP = 3
    BAD_UNLOCK = 4
    OUT_OF_VA = 5
    NOT_ALLOCATED = 6
    INVALID_ARGUMENT = 7
    NOT_FOUND = 8
    OUT_OF_RANGE = 9
    FULL = 10
    OUT_OF_MEMORY = 11
    MIGRATING = 12
    ABORTED = 13
    TIMEOUT = 14


class ClioError(Exception):
    """Error surfaced to a caller, tagged with its wire status."""

    status = Status.BAD_OP

    def __init__(self, message: str = "", status: Status | None = None) -> None:
        super().__init__(message or self.__class__.__name__)
        if status is not None:
            self.status = status


class PermissionFault(ClioError):
    status = Status.PERM


class OutOfVa(ClioError):
    status = Status.OUT_OF_VA


class NotAllocated(ClioError):
    status = Status.NOT_ALLOCATED


class InvalidArgument(ClioError, ValueError):
    status = Status.INVALID_ARGUMENT


class OutOfMemory(ClioError):
    status = Status.OUT_OF_MEMORY


class OutOfRange(ClioError):
    status = Status.OUT_OF_RANGE


class Full(ClioError):
    status = Status.FULL


class RequestTimeout(ClioError):
    status = Status.TIMEOUT


_BY_STATUS = {cls.status: cls for cls in
              (PermissionFault, OutOfVa, NotAllocated, InvalidArgument, OutOfMemory,
               OutOfRange, Full, RequestTimeout)}


def error_for(status: Status, message: str = "") -> ClioError:
    cls = _BY_STATUS.get(status, ClioError)
    if cls is ClioError:
        return ClioError(message or status.name, status)
    return cls(message or status.name)
