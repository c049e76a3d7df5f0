"""Retail P2P double auction, aggregator settlement and leader-follower MARL."""
__version__ = "0.1.0"
