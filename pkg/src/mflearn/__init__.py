"""Multi-fidelity surrogate training for two-phase porous-media flow."""

__version__ = "0.1.0"
