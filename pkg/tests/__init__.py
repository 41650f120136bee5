"""Test package for spatial_dr."""
