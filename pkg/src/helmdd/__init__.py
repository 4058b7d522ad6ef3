"""Helmholtz solver toolkit: adaptive 27-point stencils, ORAS preconditioned GMRES, CBS oracle."""
__version__ = "0.1.0"
