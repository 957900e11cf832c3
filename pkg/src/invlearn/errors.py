"""Exception hierarchy shared by all modules."""


class InvLearnError(Exception):
    """Base class for every error raised by invlearn."""


class DomainError(InvLearnError, ValueError):
    """An argument or iterate lies outside the admissible set."""


class ContractError(InvLearnError, ValueError):
    """Inputs violate a shape or length contract."""


class EigenSolverError(InvLearnError):
    pass


class DivergenceError(InvLearnError):
    def __init__(self, t, norm):
        super().__init__(f"divergence at iteration t={t} (iterate norm {norm:.3e})")
        self.t = t
        self.norm = norm


class DegenerateSamplingError(InvLearnError):
    pass


class InsufficientSpectrumError(InvLearnError):
    pass


class SourceConstructionError(InvLearnError):
    pass


class ConfigError(InvLearnError, ValueError):
    pass
