"""Risotto."""
