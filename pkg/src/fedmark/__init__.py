"""Watermark embedding for personalized federated learning, desk-scale simulator.

The package trains a shared representation plus per-client private heads,
embeds a private watermark in each head and a server-issued watermark slice
in a per-client region of the representation, and flags tampered uploads
with a cohort statistics detector.
"""

__version__ = "0.1.0"
