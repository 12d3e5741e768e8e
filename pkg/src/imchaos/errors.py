class ImchaosError(Exception):
    pass


class DiagonalSingularity(ImchaosError, ValueError):
    pass


class NotPositiveSemiDefinite(ImchaosError):
    pass


class FactorizationFailure(ImchaosError):
    pass


class ScaleUnresolved(ImchaosError, ValueError):
    pass


class SupportViolation(ImchaosError, ValueError):
    pass


class NonConverged(ImchaosError):
    pass


class InfeasibleDimension(ImchaosError, ValueError):
    pass


class ConfigError(ImchaosError, ValueError):
    pass
