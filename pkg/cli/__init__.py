"""Phenotyper command-line layer."""
