"""Two-stage hierarchical Bayesian NNGP regression for forest biomass
mapping and small area estimation."""

__version__ = "0.1.0"
