"""Tests for the mmgfrog simulation and retrieval package."""
