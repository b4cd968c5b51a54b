"""Joint open-vocabulary detector and language model over a shared embedding."""

__version__ = "0.1.0"
