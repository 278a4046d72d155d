class NumericError(ArithmeticError):
    """Raised when a numerical kernel fails or an iterate degenerates.

    ``iteration`` and ``mode`` are filled in when the failure can be pinned
    to a specific solver step or tensor mode.
    """

    def __init__(self, message, *, iteration=None, mode=None):
        super().__init__(message)
        self.iteration = iteration
        self.mode = mode
