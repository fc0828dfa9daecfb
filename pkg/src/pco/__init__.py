"""GOPT-style pronunciation scoring with a phonemic contrast ordinal loss."""

__version__ = "0.1.0"
