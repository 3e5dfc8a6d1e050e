"""Anytime kinodynamic motion planning for physically linked robot teams."""

__version__ = "0.1.0"
