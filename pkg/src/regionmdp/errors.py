"""Exception types shared across the toolkit."""


class RegionMdpError(Exception):
    """Base class for toolkit errors."""


class DataError(RegionMdpError):
    """Malformed or contract-violating input data."""


class ConfigError(RegionMdpError):
    """Invalid configuration; message lists every violated field."""


class ArtifactError(RegionMdpError):
    """A stage's upstream artifact is missing; message names the producer."""


class TrainingError(RegionMdpError):
    """Kernel training failed (for example, a diverged loss)."""


class PlanningError(RegionMdpError):
    """Value iteration could not produce a solution."""


class OpeError(RegionMdpError):
    """Off-policy evaluation cannot be computed from the given inputs."""
