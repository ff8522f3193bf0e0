"""Structured mean field approximations between factorised Q and junction trees."""

__version__ = "0.1.0"
