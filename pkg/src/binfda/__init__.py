"""Functional data analysis of binary learning curves.

Registration of Bernoulli trial sequences, CLR-transformed warps, weighted
bivariate FPCA of amplitude and phase, and two-group permutation tests.
"""

__version__ = "0.1.0"
