"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A linear-algebra or numeric step failed (singular system, bad input)."""


class ConvergenceError(NumericError):
    """An iterative fit ran out of iterations.

    Carries the last iterate so callers can inspect how close the fit got.
    """

    def __init__(self, message, beta=None, beta0=None, gradient_norm=None, n_iter=None):
        super().__init__(message)
        self.beta = beta
        self.beta0 = beta0
        self.gradient_norm = gradient_norm
        self.n_iter = n_iter
