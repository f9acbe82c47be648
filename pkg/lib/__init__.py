"""Shared library modules for fused quantile treatment effect estimation."""
