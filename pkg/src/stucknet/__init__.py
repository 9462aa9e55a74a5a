"""Stuck-device fault injection and FGSM robustness workbench for
memristive crossbar MLPs."""

__version__ = "0.1.0"
