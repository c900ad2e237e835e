"""Cascaded CTR prediction: a cross-network recommender answers confident
samples, a small transformer language model answers the uncertain ones."""

__version__ = "0.1.0"
