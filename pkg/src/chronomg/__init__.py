"""Multigrid reduction in time for chaotic systems."""
