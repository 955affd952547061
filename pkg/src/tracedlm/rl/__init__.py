from . import policy, value

__all__ = ["policy", "value"]
