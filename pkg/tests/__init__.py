"""Tests package for the Bregman divergence learner"""

__all__: list[str] = []
