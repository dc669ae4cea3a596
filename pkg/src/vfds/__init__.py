"""Cost-aware dynamic feature selection for recurrent time-series classifiers."""

__version__ = "0.1.0"
