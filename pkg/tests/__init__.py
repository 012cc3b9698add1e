"""Unit tests for the inversion lab."""
