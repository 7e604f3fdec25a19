"""Bayesian cohort fertility forecasting with parametric mixture age schedules."""

__version__ = "0.1.0"
