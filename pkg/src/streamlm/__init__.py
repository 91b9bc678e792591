"""Desk-scale streaming video dialogue lab.

Train a small causal LM with a silence-token objective on synthetic
timestamped streams, run it as a real-time streaming inference engine,
and measure temporal alignment, language quality, and throughput.
"""

__version__ = "0.1.0"
