class EmbedMatchError(Exception):
    """Base class for every error raised by embedmatch"""

    exit_code: int = 3


class ConfigurationError(EmbedMatchError):
    """Raised when a configuration or array shape is invalid"""

    exit_code = 1


class GenerationError(ConfigurationError):
    """Raised when the corpus settings cannot be realised"""

    pass


class InputError(EmbedMatchError):
    """Raised when input values are malformed (non-finite, duplicated, unknown)"""

    exit_code = 2


class InfeasibleAlignmentError(InputError):
    """Raised when a CTC reference cannot be aligned to the available frames"""

    code = "ctc-infeasible"

    def __init__(self, frames: int, required: int):
        super().__init__(
            f"[{self.code}] reference needs at least {required} frames, got {frames}"
        )
        self.frames = frames
        self.required = required


class DataError(EmbedMatchError):
    """Raised when data on disk or in a corpus is inconsistent"""

    exit_code = 2


class ParseError(DataError):
    """Raised when a text file cannot be parsed"""

    def __init__(self, message: str, line_number: int, path: str | None = None):
        where = f"{path}:" if path else "line "
        super().__init__(f"{where}{line_number}: {message}")
        self.line_number = line_number


class LexiconError(DataError):
    """Raised when a pronunciation lexicon violates its invariants"""

    pass


class InternalError(EmbedMatchError):
    """Raised when an internal contract is broken"""

    exit_code = 3
