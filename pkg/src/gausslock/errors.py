"""Exception types shared across the package."""


class GaussLockError(Exception):
    pass


class NonFiniteInput(GaussLockError, ValueError):
    pass


class NonConvergence(GaussLockError, RuntimeError):
    pass


class NotUnit(GaussLockError, ValueError):
    pass


class ShapeMismatch(GaussLockError, ValueError):
    pass


class RankTooLarge(GaussLockError, ValueError):
    pass


class EmptyDataset(GaussLockError, ValueError):
    pass


class NonFiniteLoss(GaussLockError, FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite loss at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UnknownFamily(GaussLockError, ValueError):
    pass


class FormatVersionMismatch(GaussLockError, ValueError):
    pass


class ChecksumMismatch(GaussLockError, ValueError):
    pass


class FingerprintMismatch(GaussLockError, ValueError):
    pass


class ConfigError(GaussLockError, ValueError):
    pass
