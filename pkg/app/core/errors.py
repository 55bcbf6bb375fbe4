"""
Exception hierarchy. Each class carries the CLI exit code it maps to.
"""


class ThermalDiffError(Exception):
    exit_code = 1


class UsageError(ThermalDiffError):
    """Bad command line."""
    exit_code = 1


class ConfigError(ThermalDiffError):
    """Invalid or incompatible configuration."""
    exit_code = 1


class ShapeError(ThermalDiffError, ValueError):
    """Tensor shape or geometry violation."""
    exit_code = 1


class DataError(ThermalDiffError):
    """Missing, undecodable or empty data."""
    exit_code = 2


class NumericError(ThermalDiffError):
    """Non-finite values or numerically invalid inputs."""
    exit_code = 3
