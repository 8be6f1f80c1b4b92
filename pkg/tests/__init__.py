"""Tests for the BISCUIT causal representation lab."""
