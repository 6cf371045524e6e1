"""
xLSTM engine: mLSTM cell (recurrent and chunkwise), the post-up-projection
block stack, analytic cost calculators, a desk-scale trainer, inference
benchmarks and a small session service.
"""

__version__ = "1.0.0"
