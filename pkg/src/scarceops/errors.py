"""Exception hierarchy shared by the library, CLI and HTTP service.

Each class carries a short machine code, a CLI exit code and an HTTP status
so both front ends map failures the same way.
"""


class ScarceOpsError(Exception):
    code = "internal"
    exit_code = 5
    http_status = 500


class NotFoundError(ScarceOpsError, KeyError):
    code = "not_found"
    exit_code = 3
    http_status = 404

    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class ValidationError(ScarceOpsError, ValueError):
    code = "validation"
    exit_code = 4
    http_status = 400


class ConflictError(ScarceOpsError):
    code = "conflict"
    exit_code = 4
    http_status = 409


class NoModelError(NotFoundError):
    """No succeeded run exists for a task, so its metric is still -inf."""

    code = "no_model"


class StorageError(ScarceOpsError):
    code = "storage"
