"""Standalone benchmark scripts."""
