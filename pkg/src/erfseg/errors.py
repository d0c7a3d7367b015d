"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes or conv geometry inconsistent with the requested op."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class DegenerateStatisticsError(ShapeError):
    """Instance statistics requested over a single spatial element."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
