"""Finite-dimensional quantum measurement laboratory.

Coupled system/apparatus measurement on finite-dimensional spaces, a
structured spin-chain pointer that scales to large apparatus sizes, and
discrete rational approximants of continuous-spectrum observables.
"""
__version__ = "0.1.0"
