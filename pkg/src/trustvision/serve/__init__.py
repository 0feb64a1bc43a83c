from .app import LoadedModel, Service, app_from_env, create_app
from .ratelimit import Admission, SlidingWindowLimiter

__all__ = ["LoadedModel", "Service", "app_from_env", "create_app", "Admission", "SlidingWindowLimiter"]
