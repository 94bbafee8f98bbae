"""Tactical planning of intermodal rail services, blocks and railcar fleets."""

__version__ = "0.1.0"
