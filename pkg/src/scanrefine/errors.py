"""Exception hierarchy shared by every stage of the pipeline."""


class ScanRefineError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class MalformedFileError(ScanRefineError):
    pass


class InvalidDataError(ScanRefineError):
    pass


class UnknownLabelError(ScanRefineError):
    def __init__(self, raw_id, index):
        self.raw_id = int(raw_id)
        self.index = int(index)
        super().__init__(
            f"unmapped semantic id {self.raw_id} at point {self.index} "
            f"(byte offset {4 * self.index})"
        )


class MalformedLineError(ScanRefineError):
    def __init__(self, lineno, message):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class InvalidPoseError(ScanRefineError):
    pass


class EmptyTargetError(ScanRefineError):
    pass


class EmptyInputError(ScanRefineError):
    pass


class ShapeError(ScanRefineError):
    pass


class InvalidConfigError(ScanRefineError):
    exit_code = 2


class DegenerateBatchError(ScanRefineError):
    pass


class IncompatibleModelError(ScanRefineError):
    pass


class NotFoundError(ScanRefineError, FileNotFoundError):
    exit_code = 3
