"""Isolation test harness for partitioning hypervisors, built on a simulated testbed."""

__version__ = "0.1.0"
