"""Lightweight PV-cell defect classifier: architecture search plus knowledge distillation."""

__version__ = "0.1.0"
