"""Numerical laboratory for multidimensional screening and its identification."""
