"""Exception and warning types shared across the package."""


class StrengthNetError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(StrengthNetError, ValueError):
    pass


class TooShort(InvalidInput):
    pass


class DegenerateChannel(StrengthNetError, ValueError):
    pass


class InsufficientData(StrengthNetError, ValueError):
    pass


class ParseError(StrengthNetError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingLabel(StrengthNetError, KeyError):
    def __init__(self, utterance_id):
        super().__init__(utterance_id)
        self.utterance_id = utterance_id

    def __str__(self):
        return f"no strength label for utterance {self.utterance_id!r}"


class NumericalError(StrengthNetError, ArithmeticError):
    pass


class DegenerateGroupWarning(UserWarning):
    """All raw scores in a (dataset, emotion) group are equal."""


class ConvergenceWarning(UserWarning):
    pass
