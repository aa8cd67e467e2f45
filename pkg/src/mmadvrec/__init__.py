"""Evasion-style promotion attacks on multimodal recommenders and the
coordinated adversarial-training defense, with gradient-mismatch diagnostics.
"""

__version__ = "0.1.0"
