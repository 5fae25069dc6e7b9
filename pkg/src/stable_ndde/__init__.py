"""Neural delay differential equations with Lyapunov-Razumikhin stabilization."""

__version__ = "0.1.0"
