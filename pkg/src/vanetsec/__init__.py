"""Security stack for vehicular ad-hoc networks, with a deterministic simulator."""

__version__ = "0.1.0"
