"""Battery-pack cell resistance tracking and fault probabilities from field telemetry."""

__version__ = "0.1.0"
