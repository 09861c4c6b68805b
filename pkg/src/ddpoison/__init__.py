"""Data-poisoning attacks on data-driven controller design."""

__version__ = "0.1.0"
