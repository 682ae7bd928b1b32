"""Conditional tabular GAN synthesis of insurance datasets with cross-validated ML-efficacy evaluation."""

__version__ = "0.1.0"
