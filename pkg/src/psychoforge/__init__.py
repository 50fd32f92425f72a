"""Big Five persona agents and their psychometric validation."""

__version__ = "0.1.0"
