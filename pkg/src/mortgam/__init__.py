"""Bayesian mortality forecasting.

Fits a hybrid model for death rates -- a P-spline GAM over most ages, a
logistic parametric curve at old ages and a separate infant model -- by
Hamiltonian Monte Carlo, combines fits with different GAM/parametric
transition ages via approximate leave-one-out stacking, and produces
forecast distributions of rates, death probabilities and life expectancy.
"""

__version__ = "0.1.0"
