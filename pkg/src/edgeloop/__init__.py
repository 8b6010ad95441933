"""Edge-offloaded closed-loop vision control testbed."""

__version__ = "0.1.0"
