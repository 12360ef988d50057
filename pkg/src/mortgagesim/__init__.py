"""Agent-based mortgage simulator with product-conditioned borrower learning
and an outer product-design layer."""

__version__ = "0.1.0"
