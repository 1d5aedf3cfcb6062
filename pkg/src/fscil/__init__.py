"""Few-shot class-incremental learning with stochastic cosine classifiers and rotation self-supervision."""

__version__ = "0.1.0"
