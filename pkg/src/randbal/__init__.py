"""Randomization-inference tests of covariate balance.

Balance on a covariate is judged by the adjusted difference of treatment
and control means, referred to its exact distribution over the assignments
the design could have produced. Several covariates are combined into one
quadratic-form statistic with a chi-square reference.
"""

__version__ = "0.1.0"
