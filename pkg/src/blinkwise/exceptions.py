"""Error hierarchy. Each class carries the CLI exit code it maps to."""


class BlinkwiseError(Exception):
    exit_code = 1


class InputFormatError(BlinkwiseError, ValueError):
    exit_code = 2


class MalformedRowError(InputFormatError):
    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class UnsupportedFormatError(InputFormatError):
    pass


class PreconditionError(BlinkwiseError, ValueError):
    exit_code = 3


class DegenerateEyeError(PreconditionError):
    pass


class TooFewBlinksError(PreconditionError):
    pass


class IncompleteSubjectError(PreconditionError):
    pass


class FoldAssignmentError(PreconditionError):
    pass


class DivergenceError(BlinkwiseError, ArithmeticError):
    exit_code = 4
