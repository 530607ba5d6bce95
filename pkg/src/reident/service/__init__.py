"""HTTP review service: ranked candidate review with human decisions that
feed confirmed matches back into the gallery."""

from .app import create_app
from .state import ReviewService, ServiceConfig

__all__ = ["create_app", "ReviewService", "ServiceConfig"]
