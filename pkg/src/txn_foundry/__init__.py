"""Desk-scale sequential-transaction foundation model toolkit."""

__version__ = "0.1.0"
