"""MedKAN: Kolmogorov-Arnold image classifiers on a small autodiff engine."""
import logging

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"
