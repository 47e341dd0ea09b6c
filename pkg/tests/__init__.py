"""Test suite for the risotto package."""
