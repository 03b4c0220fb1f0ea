"""Counterfactual volume synthesis and quantitative ROI interpretation."""

__version__ = "0.1.0"
