"""Eco-driving rollout control with DP-derived and neural terminal costs."""

__version__ = "0.1.0"
