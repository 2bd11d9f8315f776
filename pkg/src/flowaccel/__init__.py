"""Training-free acceleration toolkit for flow-matching ODE samplers.

Analytic Gaussian-mixture flows and a small residual network provide exact
or cheap velocity fields; the package then exposes solvers, outer schedules
(uniform, beta, GITS-style DP, total-rotation), inner schedules with feature
caching, trajectory geometry, and evaluation metrics on top of them.
"""

__version__ = "0.1.0"
