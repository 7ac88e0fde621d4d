"""Test support package for mkdvlab."""
