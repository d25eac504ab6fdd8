"""Config package for the Bregman divergence learner"""

from .settings import settings

__all__ = ["settings"]
