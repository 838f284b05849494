"""Coop Relay Sim - cooperative cognitive radio relaying simulator and analytic engine."""

__version__ = "0.1.0"
